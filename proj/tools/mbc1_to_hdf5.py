#!/usr/bin/env python3
"""Convert an MBC1 capture archive into an HDF5 file.

Each dataset becomes an HDF5 dataset of the same name with its timestamps,
exposures, device, tag and bit depth as attributes. The capture
configuration and archive attributes are stored on the root group.
"""

import argparse
import json
import struct
import sys

import h5py
import numpy as np

DTYPES = {"u8": "<u1", "u16": "<u2", "f32": "<f4", "f64": "<f8"}
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def read_header(f):
    fixed = f.read(16)
    if len(fixed) < 16 or fixed[:4] != b"MBC1":
        raise ValueError("not an MBC1 archive")
    version, hlen = struct.unpack("<IQ", fixed[4:16])
    if version != 1:
        raise ValueError(f"unsupported MBC1 version {version}")
    header = json.loads(f.read(hlen).decode("utf-8"))
    return header, 16 + hlen


def convert(src: str, dst: str, check: bool) -> None:
    with open(src, "rb") as f, h5py.File(dst, "w") as out:
        header, payload = read_header(f)
        out.attrs["format"] = "MBC1"
        out.attrs["capture_time"] = header["capture_time"]
        out.attrs["config"] = header["config"]
        out.attrs["attributes"] = json.dumps(header.get("attributes", {}))
        for d in header["datasets"]:
            f.seek(payload + d["offset"])
            raw = f.read(d["length"])
            if len(raw) != d["length"]:
                raise ValueError(f"dataset {d['name']} is truncated")
            if check and fnv1a64(raw) != int(d["checksum"], 16):
                raise ValueError(f"checksum mismatch in dataset {d['name']}")
            arr = np.frombuffer(raw, dtype=DTYPES[d["dtype"]]).reshape(d["shape"])
            ds = out.create_dataset(d["name"], data=arr, compression="gzip", compression_opts=4)
            for key in ("kind", "device", "tag", "bit_depth", "checksum"):
                ds.attrs[key] = d.get(key, "")
            ds.attrs["timestamps_ms"] = np.asarray(d.get("timestamps_ms", []), dtype=np.int64)
            ds.attrs["exposure_us"] = np.asarray(d.get("exposure_us", []), dtype=np.int64)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("archive")
    ap.add_argument("output")
    ap.add_argument("--check", action="store_true", help="verify dataset checksums (slow for large archives)")
    args = ap.parse_args()
    try:
        convert(args.archive, args.output, args.check)
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
