"""Count parameters of the two-block classifier from layer dimensions alone.

Deliberately independent of the package: the layer table below is written out by hand
from the architecture (3x3 convs, 40 filters, SE ratio 2, 1x1 projection shortcut only
where the channel count changes, 10-way dense head) and counted with per-layer formulas.

    python scripts/count_params.py            # BN folded into the convs (export form)
    python scripts/count_params.py --with-bn  # trainable form, gamma/beta per BN
"""

import argparse

FILTERS, KERNEL, SE_RATIO, CLASSES = 40, 3, 2, 10


def conv(k, cin, cout):
    return k * k * cin * cout + cout


def se(c, ratio):
    hid = c // ratio
    return c * hid + hid + hid * c + c


def block(cin, cout, with_bn):
    rows = [
        ("conv1", conv(KERNEL, cin, cout)),
        ("conv2", conv(KERNEL, cout, cout)),
    ]
    if cin != cout:
        rows.append(("shortcut 1x1", conv(1, cin, cout)))
    rows.append(("squeeze-excite", se(cout, SE_RATIO)))
    if with_bn:
        rows += [("bn1 gamma/beta", 2 * cout), ("bn2 gamma/beta", 2 * cout)]
    return rows


def table(with_bn=False):
    rows = [("block1 " + n, v) for n, v in block(1, FILTERS, with_bn)]
    rows += [("block2 " + n, v) for n, v in block(FILTERS, FILTERS, with_bn)]
    rows.append(("dense", FILTERS * CLASSES + CLASSES))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--with-bn", action="store_true")
    ap.add_argument("--bytes-per-param", type=int, default=2)
    args = ap.parse_args()
    rows = table(args.with_bn)
    for name, n in rows:
        print(f"{name:24s} {n:7d}")
    total = sum(n for _, n in rows)
    payload = total * args.bytes_per_param
    print(f"total {total}")
    print(f"payload_bytes {payload}")
    print(f"payload_kb {payload / 1000:.2f}")


if __name__ == "__main__":
    main()
