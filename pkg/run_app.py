import sys
from pathlib import Path

# flat module layout: the repository root is the import root
sys.path.insert(0, str(Path(__file__).parent))

try:
    from main import main
except ImportError as e:
    print(f"Error importing main module: {e}", file=sys.stderr)
    print("Install the dependencies with: pip install -r requirements.txt", file=sys.stderr)
    sys.exit(1)

if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
