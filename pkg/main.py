"""Main entry point for the Masked AutoEncoder Purifier"""
import sys

from dotenv import load_dotenv

from src.cli import run

# Load environment variables from .env file
load_dotenv()


def main() -> int:
    """Main entry point"""
    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
