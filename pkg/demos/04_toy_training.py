"""Generate a small dataset, train a reduced network for a few hundred steps
and evaluate it. Runs in a few minutes on one core.

The full-size run is `armsight gen-data && armsight train && armsight eval`.

    python demos/04_toy_training.py
"""

import tempfile
from pathlib import Path

from armsight.dataset import GenerationConfig, generate_samples, load_arrays, save_dataset
from armsight.dataset import split_dataset, type_recordings
from armsight.evaluation import evaluate_model, report_markdown
from armsight.kinematics import ROBOT_TYPES
from armsight.model import build_model, toy_config
from armsight.trainer import TrainConfig, train

RES = (32, 26)

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    recordings = type_recordings(ROBOT_TYPES, 30)
    samples, ids = generate_samples(recordings, seed=1, gen=GenerationConfig(resolution=RES))
    manifest = save_dataset(samples, tmp / "data", 1, ids, recordings)
    train_m, test_m = split_dataset(manifest, 0.8, seed=1)
    train_set, test_set = load_arrays(train_m), load_arrays(test_m)
    print(f"{len(train_set)} training and {len(test_set)} test samples at {RES[0]}x{RES[1]}")

    model = build_model(toy_config(RES), seed=1)
    before = evaluate_model(model, test_set)
    # a larger step than the default schedule so that a short run shows progress
    cfg = TrainConfig(batch_size=16, lr_start=1e-2, lr_end=1e-4, total_iterations=1500,
                      seed=1, checkpoint_every=100)

    def progress(rec):
        if rec.test_l_final is not None:
            print(f"  iter {rec.iteration:4d} lr {rec.lr:.1e} train {rec.l_final:.3f} "
                  f"test {rec.test_l_final:.3f}")

    model, log = train(model, train_set, test_set, cfg, out_dir=tmp / "ckpt", progress=progress)
    after = evaluate_model(model, test_set, train_log=log)
    print(f"\nmean joint error {before.joint_error_mean:.1f} cm untrained, "
          f"{after.joint_error_mean:.1f} cm trained\n")
    print(report_markdown(after))
