#!/usr/bin/env python3
"""End-to-end demo: build a small model, calibrate, convert, run, verify.

Creates a token model (embedding -> BiLSTM -> MadNorm-LSTM -> attention
decoder -> projection), quantizes it through the standard pipeline and
checks the integer engine bit-exactly against the fake-quantization oracle
before printing a few logits.
"""
import argparse
import tempfile

import numpy as np

from qlstm import floatguard, runtime, serialize
from qlstm.attention import AttentionWeights
from qlstm.lstm import LstmWeights
from qlstm.runtime import (
    AttentionDecoderLayer,
    BiLstmLayer,
    EmbeddingLayer,
    FinalProjectionLayer,
    FloatModel,
    LstmLayer,
)


def build_model(rng, vocab=20, emb=8, m=8):
    def cell(n):
        return LstmWeights(
            rng.normal(0, 0.4, (4 * m, n)), rng.normal(0, 0.4, (4 * m, m)), rng.normal(0, 0.1, 4 * m)
        )

    attn = AttentionWeights(
        rng.normal(0, 0.4, (m, m)),
        rng.normal(0, 0.4, (m, m)),
        rng.normal(0, 0.4, m),
        rng.normal(0, 0.4, (4 * m, m)),
    )
    return FloatModel(
        [
            EmbeddingLayer(rng.normal(0, 1, (vocab, emb))),
            BiLstmLayer(cell(emb), cell(emb)),
            LstmLayer(cell(2 * m), norm=True),
            AttentionDecoderLayer(cell(m), attn),
            FinalProjectionLayer(rng.normal(0, 0.5, (vocab, m)), rng.normal(0, 0.1, vocab)),
        ]
    )


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--pieces", type=int, default=16)
    parser.add_argument("--cell-bits", type=int, choices=(8, 16), default=8)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    vocab = 20
    model = build_model(rng, vocab=vocab)

    batches = [rng.integers(0, vocab, size=24) for _ in range(4)]
    ranges = runtime.calibrate(model, batches)
    print(f"calibrated {len(ranges)} stages")

    im = runtime.convert(model, ranges, pieces=args.pieces, cell_bits=args.cell_bits)
    with tempfile.TemporaryDirectory() as tmp:
        path = f"{tmp}/model.json"
        serialize.save(im, path)
        im = serialize.load(path)
        print(f"integer model round-tripped through {path}")

    seq = rng.integers(0, vocab, size=12)
    with floatguard.trace_float_ops() as count:
        logits = runtime.run(im, seq)
        floats = count()
    reference = runtime.run_reference(im, seq)
    exact = np.array_equal(logits.astype(np.int64), reference)
    print(f"ran {len(seq)} steps: float ops on integer path = {floats}, "
          f"bit-exact vs oracle = {exact}")
    print("first logits row:", logits[0][:8].tolist())
    if not exact or floats:
        raise SystemExit(1)


if __name__ == "__main__":
    main()
