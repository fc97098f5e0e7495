"""FGSM and PGD on a quickly trained model.

Run: python demos/attacks.py
"""
import numpy as np

from specguard.attacks import AttackConfig, fgsm, pgd
from specguard.data import synth_generate
from specguard.model import VitConfig, classifier, init_params
from specguard.trainer import TrainConfig, evaluate, train

cfg = VitConfig()
data = synth_generate(cfg.classes, 30, cfg.image_size, seed=1)
test = synth_generate(cfg.classes, 10, cfg.image_size, seed=1, split="test")
params = train(init_params(cfg, seed=1), data, TrainConfig(epochs=8, lr=0.01, seed=1)).params

print("clean accuracy", evaluate(params, test))
for eps in (1 / 255, 2 / 255, 8 / 255):
    row = [evaluate(params, test, AttackConfig("fgsm", eps))]
    row += [evaluate(params, test, AttackConfig("pgd", eps, steps=k)) for k in (2, 20)]
    print(f"eps={eps * 255:.0f}/255  fgsm {row[0]:.2f}  pgd-2 {row[1]:.2f}  pgd-20 {row[2]:.2f}")

# one PGD step of size epsilon is FGSM
f = classifier(params)
x, y = test.images[:8], test.labels[:8]
a = fgsm(f, x, y, AttackConfig("fgsm", 4 / 255))
b = pgd(f, x, y, AttackConfig("pgd", 4 / 255, alpha=4 / 255, steps=1))
print("pgd-1 == fgsm:", np.array_equal(a, b), f" max |delta| * 255 = {np.max(np.abs(b - x)) * 255:.6f}")
