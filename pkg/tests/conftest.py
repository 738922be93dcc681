import sys
from pathlib import Path

import torch

# single-threaded torch keeps run-to-run results bit-identical
torch.set_num_threads(1)

sys.path.insert(0, str(Path(__file__).parent))
