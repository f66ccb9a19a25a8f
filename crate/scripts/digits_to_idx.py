"""Convert the `mnist` npm package digit files into gzipped IDX files.

The package ships 10,000 MNIST digits as per-class JSON arrays of intensities
in [0, 1] rounded to three decimals. Pixels are mapped back to bytes with
round(255 * v) and written in class-interleaved order.

usage: python3 scripts/digits_to_idx.py <package>/src/digits data/
"""

import gzip
import json
import struct
import sys
from pathlib import Path


def main(src: Path, out: Path) -> None:
    per_class = []
    for c in range(10):
        flat = json.loads((src / f"{c}.json").read_text())["data"]
        per_class.append([flat[i : i + 784] for i in range(0, len(flat), 784)])
    images, labels = [], []
    depth = max(len(p) for p in per_class)
    for i in range(depth):
        for c, imgs in enumerate(per_class):
            if i < len(imgs):
                images.append(bytes(min(255, max(0, round(v * 255))) for v in imgs[i]))
                labels.append(c)
    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / "digits-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(img)
    with gzip.GzipFile(out / "digits-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))
    print(f"wrote {len(images)} images")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
