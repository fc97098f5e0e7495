"""Training the tiny ViT with and without the spectral penalty.

A short run on the synthetic set; the per-kind mean of the top singular value
is printed after every epoch.  A larger penalty weight than the default makes
the effect visible in a few epochs.

Run: python demos/spectral_penalty.py
"""
import numpy as np

from specguard.data import synth_generate
from specguard.model import VitConfig, init_params
from specguard.msvp import MsvpConfig
from specguard.trainer import TrainConfig, train

cfg = VitConfig()
data = synth_generate(cfg.classes, 30, cfg.image_size, seed=0)
test = synth_generate(cfg.classes, 10, cfg.image_size, seed=0, split="test")
params = init_params(cfg, seed=0)


def kind_means(sigmas):
    means = {k: np.mean([v for key, v in sigmas.items() if key.endswith(k)]) for k in "qkv"}
    return "  ".join(f"sigma_{k} {m:.4f}" for k, m in means.items())


for label, penalty in (("vanilla", MsvpConfig(enabled=False)), ("penalised", MsvpConfig.uniform(1e-2))):
    print(label)
    tc = TrainConfig(epochs=6, batch_size=50, lr=0.01, msvp=penalty, seed=0)
    res = train(params, data, tc, eval_data=test,
                on_epoch=lambda r: print(f"  epoch {r.epoch}  loss {r.cls_loss:.3f}  acc {r.clean_accuracy:.2f}  "
                                         f"{kind_means(r.sigmas)}"))
