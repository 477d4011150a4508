"""Train a small word-level LSTM, then compress it four ways.

The corpus is the package's seeded synthetic English-like text (about
200 KB), so the run needs no downloads. Pass ``--quick`` for a two-epoch
smoke run.
"""

import argparse
import time

from lmcompress.compress import lowrank_factorize, prune_model, quantize_model, tt_compress
from lmcompress.corpus import split_corpus, synthetic_corpus
from lmcompress.data import build_vocab, encode
from lmcompress.model import ModelConfig, count_params, init_model, model_size_bytes, perplexity
from lmcompress.train import TrainConfig, train

ap = argparse.ArgumentParser()
ap.add_argument("--quick", action="store_true")
ap.add_argument("--hidden", type=int, default=64)
args = ap.parse_args()
epochs = 2 if args.quick else 10
k = args.hidden

tr, va, te = split_corpus(synthetic_corpus(200_000, seed=0))
vocab = build_vocab(tr)
train_ids, valid_ids, test_ids = (encode(vocab, t) for t in (tr, va, te))
print(f"{len(train_ids)} training tokens, vocabulary {len(vocab)}")

cfg = TrainConfig(lr=2e-3, batch_size=10, unroll=20, epochs=epochs)
results = []


def report(label, model):
    pp = perplexity(model, test_ids, 10, 35)
    results.append((label, count_params(model), model_size_bytes(model), pp))
    print(f"  {label}: test PP {pp:.3f}")


t0 = time.perf_counter()
dense = init_model(ModelConfig(2, k, k, len(vocab), init_scale=0.1), vocab, seed=0)
train(dense, train_ids, valid_ids, cfg, on_epoch=lambda r: print("  " + r.line()))
report(f"dense k={k}", dense)

# Pruning 90% of the softmax head hurts a lot, retraining with the mask recovers part of it
pruned, mask = prune_model(dense, 0.9, ("output",))
report("prune output 90%", pruned)
train(pruned, train_ids, valid_ids, TrainConfig(lr=1e-3, batch_size=10, unroll=20, epochs=max(1, epochs // 2)),
      masks=mask.masks)
report("  + masked retraining", pruned)

# 8-bit weights barely move the perplexity
report("quant8", quantize_model(dense))

# SVD conversion to shared-projection low-rank layers, then a short finetune
lr = lowrank_factorize(dense, k // 4)
report(f"low-rank r={k // 4} (SVD init)", lr)
train(lr, train_ids, valid_ids, TrainConfig(lr=1e-3, batch_size=10, unroll=20, epochs=max(1, epochs // 2)))
report("  + finetune", lr)

# TT conversion of every gate matrix
report("TT d=2 rank cap 4", tt_compress(dense, 2, max_ranks=4))

print(f"\n{'model':<28} {'params':>9} {'bytes':>10} {'test PP':>9}")
for label, n, b, pp in results:
    print(f"{label:<28} {n:>9} {b:>10} {pp:>9.3f}")
print(f"\n{time.perf_counter() - t0:.0f}s")
