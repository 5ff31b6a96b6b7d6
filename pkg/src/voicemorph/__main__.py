from voicemorph.cli import main

main()
