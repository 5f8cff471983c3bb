from spmdpool.cli import main

main()
