# Copyright (c) The flashbft Contributors
# SPDX-License-Identifier: Apache-2.0

"""Smoke test for the flashbft_py extension module.

Build and install it first:  pip install --no-build-isolation ./crates/py
Then run:                     python3 python/smoke_test.py
"""

import csv
import io

import flashbft_py as fb

SCENARIO = """\
name = smoke
matrix = euclidean:7:3:80
t = 2
theta = 8
clients = all:1
duration_ms = 8000
drain_ms = 3000
seed = 3
"""


def two_clusters(n, split, intra, inter):
    return [
        [0.0 if i == j else (intra if (i < split) == (j < split) else inter) for j in range(n)]
        for i in range(n)
    ]


def main():
    w = fb.weights(10, 2)
    assert w["units"] == [5] * 4 + [2] * 6, w
    assert w["quorum_units"] == 22, w

    m = two_clusters(7, 4, 5.0, 100.0)
    best = fb.exhaustive(m, 1)
    annealed = fb.anneal(m, 1, seed=7)
    assert annealed["latency_ms"] == best["latency_ms"], (annealed, best)
    assert fb.predict_latency(m, 1, best["leader"], best["high"]) == best["latency_ms"]

    run = fb.run_scenario(SCENARIO)
    base = fb.run_scenario(SCENARIO, baseline=True)
    assert run["linearizable"] and base["linearizable"]
    assert run["fields"]["unfinished"] == "0"
    rows = list(csv.DictReader(io.StringIO(run["csv"]["consensus"])))
    assert rows and {r["mode"] for r in rows} <= {"fast", "conservative"}
    speedup = base["consensus_mean_ms"] / run["consensus_mean_ms"]
    assert speedup >= 1.0, speedup

    try:
        fb.run_scenario(SCENARIO + "fault = 1000 equivocate_coalition 0,1,2\n")
    except ValueError as e:
        assert "equivocate_coalition" in str(e)
    else:
        raise AssertionError("oversized coalition accepted")

    print(f"flashbft_py {fb.__version__}: ok (consensus speedup {speedup:.2f}x over {len(rows)} instances)")


if __name__ == "__main__":
    main()
