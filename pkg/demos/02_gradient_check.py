"""Verify every layer and loss against central finite differences.

Smooth operations are held to 1e-6 relative error and piecewise ones (ReLU,
max pooling, the full network) to 1e-4. Probes that straddle a ReLU or pooling
switch are refined with a smaller step and skipped if the switch persists.

    python demos/02_gradient_check.py
"""

import time

from armsight import gradsuite

start = time.perf_counter()
results = gradsuite.run_suite(seed=0, include_model=True)
for r in results:
    status = "ok" if r.passed else "FAIL"
    print(f"{r.name:28s} max rel error {r.max_error:.2e}  (tol {r.tolerance:.0e})  {status}")
print(f"\n{sum(r.passed for r in results)}/{len(results)} passed in "
      f"{time.perf_counter() - start:.1f} s")
