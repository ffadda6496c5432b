"""Train a small model on synthetic sites, then probe drift and unseen sites.

A reduced encoder trains in seconds on one core. The full-size
default configuration is exercised by tests/test_acceptance.py.

Run: python3 demos/open_world_and_drift.py
"""
import time

from udfs.encoder import EncoderConfig
from udfs.engine import Rng
from udfs.evaluation import score_closed, score_open_world
from udfs.proto import TrainConfig, train
from udfs.representation import extract_udfs
from udfs.synth import EARLY, LATE, generate, generate_unknown_pool, make_profiles
from udfs.thresholds import classify_batch, calibrate

SEED, SIGMA = 3, 0.3
N_MAX = 32


def seqs(traces):
    return [extract_udfs(t, N_MAX) for t in traces]


def truth(items):
    return {s.trace_id: s.label for s in items}


profiles = make_profiles(6, SEED, sigma=SIGMA, separation=4.0, drift_delta=0.5 * SIGMA)
train_set = seqs(generate(profiles, 30, EARLY, SEED))
held_out = seqs(generate(profiles, 20, EARLY, SEED + 100))
late = seqs(generate(profiles, 20, LATE, SEED))
unseen = seqs(generate_unknown_pool(20, 5, SEED + 1, profiles, sigma=SIGMA))

enc = EncoderConfig(d_model=32, n_layers=2, n_heads=2, d_ff=64, dropout=0.1, n_max=N_MAX)
start = time.perf_counter()
model = train(train_set, TrainConfig(epochs=150, lr=2e-3, c_way=6), Rng(SEED), enc)
print(f"trained on {len(train_set)} traces of {len(profiles)} sites in {time.perf_counter() - start:.1f}s")
print(f"episode loss: epoch 0 {model.history[0]['mean_loss']:.3f} -> epoch {len(model.history) - 1} "
      f"{model.history[-1]['mean_loss']:.3f}")

table = calibrate(model, train_set)
print("\nper-site thresholds (confusable sites get gamma < 1):")
for c in table.class_ids:
    e = table.entries[c]
    print(f"  {c}: base {e.theta_base:.3f}  gamma {e.gamma:.3f}  theta {e.theta:.3f}")

same = score_closed(classify_batch(held_out, model, reject=False), truth(held_out))
drift = score_closed(classify_batch(late, model, reject=False), truth(late), scenario="drift")
print(f"\nsame period    macro-F1 {same.macro_f1:.3f}")
print(f"later period   macro-F1 {drift.macro_f1:.3f}  (byte sizes shifted by {0.5 * SIGMA:.2f} in log space)")

mixed = held_out + unseen
on = score_open_world(classify_batch(mixed, model), truth(mixed))
off = score_open_world(classify_batch(mixed, model, reject=False), truth(mixed))
print(f"\nopen world: {len(held_out)} known + {len(unseen)} unseen-site traces")
print(f"  with thresholds  accuracy {on.accuracy:.3f}  Unknown recall {on.extra['unknown_recall']:.3f}  "
      f"known macro-F1 {on.extra['macro_f1_known']:.3f}")
print(f"  thresholds off   accuracy {off.accuracy:.3f}  Unknown recall {off.extra['unknown_recall']:.3f}")
