#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Regenerates the boot images, golden measurements and signatures of a
scenario directory, independently of the Rust implementation.

    tools/golden.py scenarios/qr_payment/qr_payment.json [--check]

Layer 0 (epa) is measured as SHA-256(code || SHA-256(memory map text));
ce and re as SHA-256(code). Signatures are Ed25519 over the measurement,
made with the demo vendor key below.
"""

import hashlib
import json
import re
import sys
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

VENDOR_SEED = hashlib.sha256(b"xine demo vendor signing key").digest()
LAYERS = ["epa", "ce", "re"]
IMAGE_LEN = 2048


def image_bytes(layer):
    out = b""
    block = 0
    while len(out) < IMAGE_LEN:
        out += hashlib.sha256(f"xine {layer} image block {block}".encode()).digest()
        block += 1
    return b"\x7fXINE" + layer.encode().ljust(3, b"\0") + out[: IMAGE_LEN - 8]


def parse_num(v):
    if isinstance(v, int):
        return v
    v = v.replace("_", "")
    return int(v, 16) if v.lower().startswith("0x") else int(v)


def memory_map_text(cfg):
    return "".join(
        f"{r['label']} {r['kind']} {parse_num(r['base']):#010x} {parse_num(r['size']):#x}\n" for r in cfg["memory"]
    )


def main():
    cfg_path = Path(sys.argv[1])
    check = "--check" in sys.argv[2:]
    root = cfg_path.parent
    text = cfg_path.read_text()
    cfg = json.loads(text)

    key = Ed25519PrivateKey.from_private_bytes(VENDOR_SEED)
    pub = key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw).hex()
    map_digest = hashlib.sha256(memory_map_text(cfg).encode()).digest()

    lines, images = [], []
    for layer in LAYERS:
        code = image_bytes(layer)
        path = root / f"{layer}.bin"
        if check:
            assert path.read_bytes() == code, f"{path} differs"
        else:
            path.write_bytes(code)
        m = hashlib.sha256(code + map_digest if layer == "epa" else code).digest()
        lines.append(f"{layer} {m.hex()}\n")
        images.append((layer, key.sign(m).hex()))

    measurements = "".join(lines)
    mpath = root / cfg["boot"]["measurements"]
    boot = (
        '"boot": {\n    "images": [\n'
        + ",\n".join(
            f'      {{ "layer": "{l}", "path": "{l}.bin", "signer": "vendor",\n        "signature": "{s}" }}'
            for l, s in images
        )
        + f'\n    ],\n    "pubkeys": {{ "vendor": "{pub}" }},\n'
        + f'    "measurements": "{cfg["boot"]["measurements"]}"\n  }}'
    )
    new_text = re.sub(r'"boot": \{.*?\n  \}', lambda _: boot, text, count=1, flags=re.S)
    if check:
        assert mpath.read_text() == measurements, f"{mpath} differs"
        assert new_text == text, f"{cfg_path} boot section differs"
        print("ok")
    else:
        mpath.write_text(measurements)
        cfg_path.write_text(new_text)
        sys.stdout.write(measurements)


if __name__ == "__main__":
    main()
