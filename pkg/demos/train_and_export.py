"""
Quantization-aware training on synthetic blobs
==============================================

Train a small ternary ViT, export it to the packed format and reload it for
inference.  Swap ``synthetic_blobs`` for ``load_mnist`` or ``load_cifar10`` to
use real data (see the README for the CLI equivalent).
"""

import tempfile
from pathlib import Path

from ternvit import model_io
from ternvit.data import synthetic_blobs
from ternvit.train import TrainConfig, evaluate, fit, model_for_run
from ternvit.vit import VitConfig

train = synthetic_blobs(classes=10, per_class=30, image_size=16, seed=0).normalized()
test = synthetic_blobs(classes=10, per_class=10, image_size=16, seed=1).normalized(train.mean, train.std)

cfg = VitConfig(image_size=16, patch_size=4, channels=3, dim=48, depth=2, heads=3, mlp_dim=96)
model = model_for_run(cfg, seed=0)
model.norm_mean, model.norm_std = list(train.mean), list(train.std)
result = fit(model, train, TrainConfig(epochs=3, batch_size=32, base_lr=2e-3, log_every=5), eval_set=test)
for rec in result.records:
    print(rec.to_line())

with tempfile.TemporaryDirectory() as tmp:
    latent = model_io.save(model, Path(tmp) / "latent.tvit")
    model.freeze(drop_latent=True)
    packed = model_io.save(model, Path(tmp) / "ternary.tvit", kind="ternary")
    print(f"checkpoint bytes: latent {latent}, ternary {packed} ({latent / packed:.1f}x)")
    reloaded = model_io.load(Path(tmp) / "ternary.tvit").model
    print("reloaded accuracy:", evaluate(reloaded, test))
