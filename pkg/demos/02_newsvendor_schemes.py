"""Train PTO, S-DFL and both R-DFL schemes on one recursive newsvendor dataset.

The default world prices each product as a function of the features and of
the quantity ordered; the oracle decision is the closed-loop equilibrium.
A reduced size keeps the run under a couple of minutes.

    python demos/02_newsvendor_schemes.py [epochs]
"""

import sys
import warnings

from rdfl.harness import RunConfig, build_dataset, build_problem, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
base = RunConfig(seed=0, N=300, epochs=epochs)
program, world = build_problem(base)
dataset = build_dataset(base, program, world)
print(f"world loop gain {world.loop_gain(base.reg_eps):.2f}, "
      f"{len(dataset)} samples, split {len(dataset.subset('train'))}/"
      f"{len(dataset.subset('val'))}/{len(dataset.subset('test'))}")

print(f"{'scheme':<14}{'test RMSE':>10}{'s/epoch':>9}{'fp iters':>9}")
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    for scheme in ("pto", "sdfl", "rdfl_unroll", "rdfl_implicit"):
        kw = {"tol": 1e-6, "damping": 1.0} if scheme == "rdfl_implicit" else {}
        art = train(base.with_overrides(scheme=scheme, **kw), dataset=dataset)
        iters = art.metrics[-1].mean_fp_iters if art.metrics else float("nan")
        print(f"{scheme:<14}{art.test_rmse:>10.4f}{art.seconds_per_epoch:>9.2f}{iters:>9.1f}")
