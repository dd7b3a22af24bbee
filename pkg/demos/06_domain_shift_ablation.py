#!/usr/bin/env python3
"""Domain shift, the reason the probabilistic machinery exists.

Domains A through D share blob geometry but differ in noise, multiplicative
bias fields, and contrast warping.  A model trained on mild domain A loses
accuracy on harsh domain C; the component toggles let us ask which parts of
the pipeline buy that robustness back.

This is the library-level version of the `flowseg ablate` command, shrunk to
a couple of minutes of CPU time.
"""

import time

import numpy as np

from flowseg.data import DOMAINS, gen_dataset
from flowseg.pipeline import (VERSION_TOGGLES, ModelConfig, config_for_version,
                              evaluate, fit)

print("=" * 70)
print("1. the four domains")
print("=" * 70)

for name, dom in DOMAINS.items():
    print(f"domain {name}: noise {dom.noise_sigma:.2f}, "
          f"bias {dom.bias_amplitude:.2f}, gamma {dom.contrast_gamma:.2f}")

size = (32, 32)
train = gen_dataset(DOMAINS["A"], 64, image_size=size)
val = gen_dataset(DOMAINS["A"], 16, rng=np.random.default_rng(5),
                  image_size=size)
target_c = gen_dataset(DOMAINS["C"], 24, image_size=size)
target_d = gen_dataset(DOMAINS["D"], 24, image_size=size)

print()
print("=" * 70)
print("2. five component combinations, trained identically")
print("=" * 70)

base = ModelConfig(image_size=size, channels=8, flow_layers=2, flow_hidden=16,
                   flow_kl_samples=32, batch_size=8, epochs=3, seed=42)
print(f"{'version':<9}{'flow':<7}{'updates':<9}{'sde':<6}"
      f"{'val A':<9}{'C':<9}{'D':<9}")
rows = []
for version in sorted(VERSION_TOGGLES):
    nf, ncvi, sde = VERSION_TOGGLES[version]
    t0 = time.perf_counter()
    model, _ = fit(train, val, config_for_version(base, version))
    row = (evaluate(val, model), evaluate(target_c, model),
           evaluate(target_d, model))
    rows.append((version, row))
    mark = lambda flag: "on " if flag else "off"
    print(f"{version:<9}{mark(nf):<7}{mark(ncvi):<9}{mark(sde):<6}"
          f"{row[0]:<9.4f}{row[1]:<9.4f}{row[2]:<9.4f}"
          f"  ({time.perf_counter() - t0:.0f}s)")

print()
print("=" * 70)
print("3. reading the table")
print("=" * 70)

ver1 = dict(rows)["ver1"]
ver5 = dict(rows)["ver5"]
print(f"ver1 (all off): A {ver1[0]:.4f} -> C {ver1[1]:.4f} "
      f"(drop {ver1[0] - ver1[1]:+.4f})")
print(f"ver5 (all on):  A {ver5[0]:.4f} -> C {ver5[1]:.4f} "
      f"(drop {ver5[0] - ver5[1]:+.4f})")
print("Every version loses accuracy on the harsh domain; with the usual")
print("seeds the fully-equipped model gives up less of it, at the price of")
print("raw source-domain accuracy.  Absolute numbers at this scale are")
print("noisy -- treat the drop, not the ranking, as the stable signal.")

print()
print("done.")
