from miamind.cli import main

main()
