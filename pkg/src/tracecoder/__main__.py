from tracecoder.cli import main

main()
