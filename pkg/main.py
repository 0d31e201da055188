"""
ConsistencyDet - few-step consistency-model object detection
Entry point: python main.py <command> [options]
"""

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
