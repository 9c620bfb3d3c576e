from lssa_lab import main

main()
