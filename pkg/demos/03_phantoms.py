#!/usr/bin/env python
# Synthetic "brain" phantoms: nested perturbed ellipses with one intensity
# per tissue class.  Writes a few of them as PGM/PPM to ./phantoms.
from pathlib import Path

import numpy as np

from advseg.data import PhantomSpec, export_label_ppm, export_pgm, generate_phantom

out = Path("phantoms")
out.mkdir(exist_ok=True)
spec = PhantomSpec()
print("class means", spec.class_means)
print("expected class fractions", np.round(spec.target_fractions(), 3))

for i in range(3):
    ph = generate_phantom(PhantomSpec(seed=i), id=f"ph{i}")
    export_pgm(ph.image, out / f"{ph.id}_img.pgm")
    export_label_ppm(ph.labels, out / f"{ph.id}_lab.ppm")
    counts = np.bincount(ph.labels.ravel(), minlength=spec.C) / ph.labels.size
    print(ph.id, "fractions", np.round(counts, 3))
print("wrote", sorted(p.name for p in out.iterdir()))
