import os
import sys

# src/ modules import each other by bare name
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "src"))

from extraction_cli import main

if __name__ == "__main__":
    sys.exit(main())
