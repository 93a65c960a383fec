import sys

from sure_denoise.app import main

if __name__ == '__main__':
    sys.exit(main())
