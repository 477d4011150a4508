"""How big are the benchmark models, and where do the bytes go?

Everything here is arithmetic on configurations, so it runs instantly:
no weights are allocated.
"""

from lmcompress.model import ModelConfig, count_params, model_size_bytes, param_manifest

V = 10000


def row(label, cfg, precision="float32"):
    n = count_params(cfg)
    mb = model_size_bytes(cfg, precision) / 1e6
    print(f"{label:<28} {n / 1e6:8.2f} M params {mb:9.2f} MB")


print("Dense two-layer LSTMs over a 10k vocabulary")
for name, k in (("small", 200), ("medium", 650), ("large", 1500)):
    row(f"  {name} (k={k})", ModelConfig(2, k, k, V))

small = ModelConfig(2, 200, 200, V)
print("\nThe small model stored with 8-bit weights (biases stay float32)")
row("  small, quant8", small, "quant8")
print(f"  ratio {model_size_bytes(small) / model_size_bytes(small, 'quant8'):.3f}")

# embedding and softmax head dominate at k=200
share = {}
for name, shape, _ in param_manifest(small):
    group = name.split(".")[0]
    n = 1
    for s in shape:
        n *= s
    share[group] = share.get(group, 0) + n
total = sum(share.values())
print("\nWhere the small model's parameters live")
for group, n in share.items():
    print(f"  {group:<10} {n:>9,d}  {100 * n / total:5.1f}%")

print("\nStructured recurrent layers at k=650")
row("  low-rank r=128", ModelConfig(2, 650, 650, V, layer_kind="lowrank-lstm", rank=128))
medium = ModelConfig(2, 650, 650, V)
lr = ModelConfig(2, 650, 650, V, layer_kind="lowrank-lstm", rank=128)
print(f"  size ratio vs dense {model_size_bytes(medium) / model_size_bytes(lr):.2f}")

print("\nTensor-train layers, k=600, four cores per matrix")
for cap in (4, 10, 30, 60):
    row(f"  TT rank cap {cap}", ModelConfig(2, 600, 600, V, layer_kind="tt-lstm", tt_dims=4, tt_ranks=cap))
