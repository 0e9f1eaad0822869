"""Write the 5000-image digit subset shipped with mlxtend as gzipped IDX files.

Run once; the output lives in src/mixvi/datasets/.
"""

from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

from mixvi.data import BUNDLED_IMAGES, BUNDLED_LABELS, write_idx

out = Path(__file__).resolve().parents[1] / "src" / "mixvi" / "datasets"
out.mkdir(parents=True, exist_ok=True)
X, y = mnist_data()
write_idx(out / BUNDLED_IMAGES, np.rint(X).astype(np.uint8).reshape(-1, 28, 28))
write_idx(out / BUNDLED_LABELS, y.astype(np.uint8))
print(f"wrote {len(y)} images to {out}")
