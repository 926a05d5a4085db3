"""Render the color key used for flow maps and the flow of a few hand-made filter fields.

    python demos/flow_wheel.py [--out demo-out]

Hue encodes direction (red points right), saturation encodes length and a
zero vector is white.
"""

import argparse
from pathlib import Path

import numpy as np

from dfnet.autodiff import Tensor
from dfnet.dynops import FilterField, FilterSpec
from dfnet.flowviz import filters_to_flow, flow_to_color, montage, write_ppm


def shift_field(dy: int, dx: int, size: int = 32) -> FilterField:
    """One-hot 9x9 filters everywhere, each selecting the pixel at (dy, dx)."""
    taps = np.zeros((1, 81, size, size))
    taps[0, (dy + 4) * 9 + (dx + 4)] = 1.0
    return FilterField(FilterSpec(9, 9), Tensor(taps))


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="demo-out")
    out = Path(ap.parse_args().out)
    out.mkdir(parents=True, exist_ok=True)

    yy, xx = np.mgrid[-32:33, -32:33].astype(float)
    write_ppm(flow_to_color(xx, yy), out / "flow_wheel.ppm")

    tiles = []
    for dy, dx in [(0, 4), (4, 0), (0, -4), (-4, 0), (3, 3)]:
        flow = filters_to_flow(shift_field(dy, dx))
        tiles.append(flow_to_color(flow, max_mag=4.0))
    write_ppm(montage(tiles, len(tiles)), out / "shift_flows.ppm")
    print(f"wrote {out / 'flow_wheel.ppm'} and {out / 'shift_flows.ppm'}")


if __name__ == "__main__":
    main()
