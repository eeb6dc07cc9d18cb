"""Generate the frozen golden forward-pass fixture.

Run from the repo root:  python3 tools/make_golden.py

Writes tests/data/golden_forward.npz: the RawPredictions of the seed-42
synthesized network on the deterministic gradient fixture image. The
golden test asserts bit-exact equality, so re-running this script is
only appropriate when the default architecture intentionally changes.
"""

from pathlib import Path
import sys

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from scarecrow.backbone import forward, synthesize_network
from test_backbone import fixture_image


def main() -> None:
    out = Path(__file__).resolve().parent.parent / "tests" / "data" / "golden_forward.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    net = synthesize_network(num_classes=3, boxes_per_cell=4, seed=42)
    raw = forward(net, fixture_image(), num_classes=3)
    np.savez(out, offsets=raw.offsets, scores=raw.scores)
    print(f"wrote {out}: offsets {raw.offsets.shape}, scores {raw.scores.shape}")
    print(f"checksum offsets sum={raw.offsets.sum():.12e} scores sum={raw.scores.sum():.12e}")


if __name__ == "__main__":
    main()
