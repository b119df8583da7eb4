from sparsereg.main import main

main()
