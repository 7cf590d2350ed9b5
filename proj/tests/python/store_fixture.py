"""Independent writer/checker for the activation-store and dataset formats.

    store_fixture.py write-store <path>    write the reference store
    store_fixture.py check-dataset <path>  validate a dataset file written in C++
"""

import json
import struct
import sys
import zlib

D_MODEL = 3
N_LAYER_STATES = 2
N_SAMPLES = 4
VOCAB = ["0", "1", "2", "3", "4"]
NONE_U32 = 0xFFFFFFFF
FLAG_UNEMBEDDING = 1
FLAG_FINAL_NORM = 2


def state_bits(sample, index):
    """Raw float32 bits of states[sample][index]; includes -0, a denormal and a NaN payload."""
    if (sample, index) == (0, 0):
        return 0x80000000
    if (sample, index) == (0, 1):
        return 0x00000001
    if (sample, index) == (1, 2):
        return 0x7FC01234
    return struct.unpack("<I", struct.pack("<f", (sample * 10 + index) / 8.0 - 1.0))[0]


class Writer:
    def __init__(self):
        self.buf = bytearray()

    def u8(self, v):
        self.buf += struct.pack("<B", v)

    def u32(self, v):
        self.buf += struct.pack("<I", v)

    def u64(self, v):
        self.buf += struct.pack("<Q", v)

    def f32(self, v):
        self.buf += struct.pack("<f", v)

    def str(self, s):
        data = s.encode("utf-8")
        self.u32(len(data))
        self.buf += data


def write_store(path):
    w = Writer()
    w.buf += b"ARSTORE\0"
    w.u32(1)
    w.str("py-reference")
    w.u32(D_MODEL)
    w.u32(N_LAYER_STATES)
    w.u64(N_SAMPLES)
    w.str("compact")
    w.str("py-tokenizer")
    w.str("carry_pos")
    w.u32(2)
    w.u32(1)  # position: tens
    w.u8(0)
    w.u64(0)
    meta = [("source", "python"), ("note", "café")]
    w.u32(len(meta))
    for k, v in meta:
        w.str(k)
        w.str(v)
    w.u32(FLAG_UNEMBEDDING | FLAG_FINAL_NORM)
    w.u32(len(VOCAB))
    for tok in VOCAB:
        w.str(tok)
    for r in range(len(VOCAB)):
        for c in range(D_MODEL):
            w.f32(r * 0.25 - c * 0.5)
    w.u8(1)  # rms norm
    w.f32(1e-5)
    for g in (1.0, 2.0, 3.0):
        w.f32(g)
    for _ in range(D_MODEL):
        w.f32(0.0)
    for i in range(N_SAMPLES):
        w.u64(100 + i)
        w.u32(i % 2)
        w.u32(NONE_U32 if i == 3 else i % len(VOCAB))
        for j in range(N_LAYER_STATES * D_MODEL):
            w.u32(state_bits(i, j))
    w.u32(zlib.crc32(bytes(w.buf)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(w.buf))


def check_dataset(path):
    with open(path, encoding="utf-8") as f:
        lines = [line for line in f.read().split("\n") if line]
    header = json.loads(lines[0])
    assert header["format"] == "arith-dataset", header
    assert header["version"] == 1
    assert header["n_items"] == len(lines) - 1, (header["n_items"], len(lines) - 1)
    ops = {"add": "+", "sub": "-", "mul": "*"}
    counts = {}
    for line in lines[1:]:
        rec = json.loads(line)
        a, b, op = rec["a"], rec["b"], rec["op"]
        sep = " " if header["template"] == "spaced" else ""
        assert rec["prompt"] == f"Calculate: {a}{sep}{ops[op]}{sep}{b} = ", rec
        assert 0 <= rec["label"] < header["num_classes"]
        assert rec["split"] in ("train", "val", "test", "none")
        if header["task"] == "carry_pos":
            pos = header["position"]
            carry = 0
            for i in range(pos + 1):
                carry = 1 if (a // 10**i) % 10 + (b // 10**i) % 10 + carry >= 10 else 0
            assert rec["label"] == carry, rec
        counts[rec["label"]] = counts.get(rec["label"], 0) + 1
    print("ok", len(lines) - 1, "items", dict(sorted(counts.items())))


def main():
    if len(sys.argv) != 3 or sys.argv[1] not in ("write-store", "check-dataset"):
        print(__doc__, file=sys.stderr)
        return 1
    if sys.argv[1] == "write-store":
        write_store(sys.argv[2])
    else:
        check_dataset(sys.argv[2])
    return 0


if __name__ == "__main__":
    sys.exit(main())
