"""Where each branch reads from, on a 5-minute archive."""

import numpy as np

from astgode.data import BRANCHES, Layout, enumerate_valid_anchors, extract_bundle, fit_normalizer, synthetic_archive

layout = Layout.from_cadence(5)
print("steps per hour/day/week:", layout.steps_per_hour, layout.steps_per_day, layout.steps_per_week)

archive = synthetic_archive(3 * layout.steps_per_week, 2, layout, missing_rate=0.01, seed=0)
full = range(archive.shape[0])
stats = fit_normalizer(archive, full)
anchors = enumerate_valid_anchors(archive, full)
print("valid anchors:", len(anchors), "first:", anchors[0])

b = extract_bundle(archive, anchors[0], stats)
for br in BRANCHES:
    t_b, step = b.offsets[br], b.steps[br]
    # input window, then the two intermediate targets, then the prediction window
    print(f"{br:>7}: input [{t_b}, {t_b + 12})  step {step:4d}  targets at {t_b + step}, {t_b + 2 * step}  "
          f"-> [{b.anchor}, {b.anchor + 12})")

# inputs are normalized with gaps imputed as 0, the masks mark what was actually observed
print("observed fraction in the prediction window:", b.masks["predicted"].mean())
print("input mean/std after normalization:", np.round(b.inputs["recent"].mean(), 3), np.round(b.inputs["recent"].std(), 3))
