import sys
from pathlib import Path

# test-local helpers (oracles) importable as plain modules
sys.path.insert(0, str(Path(__file__).parent))
