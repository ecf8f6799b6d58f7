"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 50]

Also times one full training step of the reformulator under each backend
(the backend is fixed at import, so that part runs in subprocesses).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from reformulator import _kernels as K


def cases(rng):
    b, h, V = 32, 64, 300
    gx, gh, hp = rng.normal(size=(b, 3 * h)), rng.normal(size=(b, 3 * h)), rng.normal(size=(b, h))
    _, r, z, n = K.gru_gates_forward_numpy(gx, gh, hp)
    dh = rng.normal(size=(b, h))
    logits = rng.normal(size=(b * 10, V))
    inq = (rng.random(60) < 0.3).astype(float)
    bonus = np.where(rng.random(60) < 0.1, 10.0, 0.0)
    return {
        "softmax_rows [320x300]": (K.softmax_rows_numpy, K.softmax_rows_numba, (logits,)),
        "gru_gates_forward [32x64]": (K.gru_gates_forward_numpy, K.gru_gates_forward_numba, (gx, gh, hp)),
        "gru_gates_backward [32x64]": (K.gru_gates_backward_numpy, K.gru_gates_backward_numba, (dh, hp, gh, r, z, n)),
        "best_span [60 tokens]": (K.best_span_numpy, K.best_span_numba, (inq, bonus, 3, 2)),
    }


STEP = """
import time, numpy as np
from reformulator.synthetic import reformulation_pairs
from reformulator.training import TrainConfig, new_reformulator, supervised_loss
from reformulator.numerics import Tape, backward
pairs = reformulation_pairs(32, seed=0)
cfg = TrainConfig(d=32, h=64, max_len=20)
m = new_reformulator(cfg, [t for p in pairs for t in p])
src, tgt = [s for s, _ in pairs], [t for _, t in pairs]
def step():
    with Tape() as tape:
        loss = supervised_loss(m, src, tgt)
    backward(loss, tape)
step()
t = time.perf_counter()
for _ in range({n}):
    step()
print((time.perf_counter() - t) / {n})
"""


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':30s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for name, (py, nb, a) in cases(rng).items():
        nb(*a)  # compile outside the timing
        t_py = min(timeit.repeat(lambda: py(*a), number=args.repeat, repeat=3)) / args.repeat
        t_nb = min(timeit.repeat(lambda: nb(*a), number=args.repeat, repeat=3)) / args.repeat
        print(f"{name:30s} {t_py * 1e6:10.1f} {t_nb * 1e6:10.1f} {t_py / t_nb:8.2f}")
    print()
    for flag in ("0", "1"):
        env = dict(os.environ, REFORMULATOR_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", STEP.format(n=10)], env=env, capture_output=True, text=True, check=True)
        label = "numba" if flag == "1" else "numpy"
        print(f"SFT step, batch 32 ({label}): {float(out.stdout) * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
