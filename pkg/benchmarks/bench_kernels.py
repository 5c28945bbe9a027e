"""Compare the numba kernels with the pure-numpy fallback.

Each backend runs in a fresh interpreter because ``BRANCHMOMENTS_NUMBA`` is
read at import.  Reports median wall time per workload and checks that both
backends return the same numbers.

    python3 benchmarks/bench_kernels.py [--lineages 2000] [--repeats 5]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import hashlib, json, sys, time
import numpy as np
from branchmoments import _accel
from branchmoments.model import reference_truth
from branchmoments.moments import model_correlations
from branchmoments.simulator import STANDARD_SCHEDULE, simulate_latent

n_lin, repeats = int(sys.argv[1]), int(sys.argv[2])
times = np.array(STANDARD_SCHEDULE)


def timed(fn):
    fn()  # warm-up (includes JIT compilation)
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        res = fn()
        out.append(time.perf_counter() - t0)
    return float(np.median(out)), res


res = {"backend": _accel.backend_name()}
topo_c, p_c = reference_truth("c")
B = np.full((times.size, topo_c.n_mat), 2e6)
b = np.full(topo_c.n_mat, 1e4)
dt, (psi, _) = timed(lambda: model_correlations(topo_c, p_c, p_c.pi, times, b, B))
res["psi_model_c_s"] = dt
res["psi_digest"] = psi.round(12).tolist()

topo_a, p_a = reference_truth("a")
dt, (X, _) = timed(lambda: simulate_latent(topo_a, p_a, n_lin, times[:4], seed=5))
res["ssa_model_a_s"] = dt
res["ssa_sha1"] = hashlib.sha1(np.ascontiguousarray(X).tobytes()).hexdigest()
print(json.dumps(res))
"""


def run_backend(flag, n_lin, repeats):
    env = dict(os.environ, BRANCHMOMENTS_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, "-c", WORKER, str(n_lin), str(repeats)], env=env, capture_output=True, text=True, check=True
    )
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lineages", type=int, default=2000)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)

    fast = run_backend("1", args.lineages, args.repeats)
    slow = run_backend("0", args.lineages, max(1, args.repeats // 2))
    print(f"{'workload':<28}{'numba':>12}{'numpy':>12}{'speed-up':>10}")
    for key, label in (("psi_model_c_s", "model psi, 5 types"), ("ssa_model_a_s", f"SSA, {args.lineages} lineages")):
        print(f"{label:<28}{fast[key]:>11.4f}s{slow[key]:>11.4f}s{slow[key] / fast[key]:>9.1f}x")
    same_ssa = fast["ssa_sha1"] == slow["ssa_sha1"]
    gap = max(abs(x - y) for rf, rs in zip(fast["psi_digest"], slow["psi_digest"]) for x, y in zip(rf, rs))
    print(f"identical simulation output: {same_ssa}; max psi difference: {gap:.2e}")
    return 0 if same_ssa and gap < 1e-10 else 1


if __name__ == "__main__":
    sys.exit(main())
