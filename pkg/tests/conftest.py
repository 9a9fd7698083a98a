import sys
from pathlib import Path

# tests import a couple of shared fixtures from sibling test modules
sys.path.insert(0, str(Path(__file__).parent))
