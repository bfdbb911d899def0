"""Smoke test for the callosum_py extension.

Build and install first:
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o target/wheels
    pip install target/wheels/callosum_py-*.whl
"""

import json
import os
import sys
import tempfile

import callosum_py as cp

SMALL = """
m = 2
[task]
horizon = 2
window = 6
[sub_model]
width = 4
channels = 3
[sub_train]
epochs = 1
[global_train]
epochs = 1
"""


def main():
    g = cp.Graph.synthetic(nodes=12, timesteps=120, seed=3)
    print(g)
    assert g.node_count == 12 and g.timesteps == 120
    assert cp.Graph.from_json(g.to_json()).digest() == g.digest()

    pre = cp.Ensemble.build(g, SMALL)
    print(pre, pre.test_metrics(g))
    assert pre.m == 2

    forget = g.node_ids[:2]
    touched = pre.locate(forget)
    post, cert = pre.unlearn(g, forget)
    print(cert)
    assert cert.valid and cert.influence_probe, cert.failed_checks
    assert sorted(set(forget) & set(post.live_node_ids)) == []
    assert set(cert.affected_subgraphs) == {pre.subgraphs[i][0] for i in touched}

    again = post.certify(g, forget, pre=pre)
    assert again.valid

    # Blowing up the forgotten nodes changes nothing for the retained ones.
    loud = g.scaled(forget, 1e6)
    post_loud, _ = cp.Ensemble.build(loud, SMALL).unlearn(loud, forget)
    assert post_loud.digest() == post.digest()
    assert post_loud.test_predictions(loud) == post.test_predictions(g)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "post.json")
        post.save(path)
        assert cp.Ensemble.load(path).digest() == post.digest()

    try:
        cp.Ensemble.build(g, "[bogus]\nx = 1\n")
    except ValueError as e:
        print("config error:", e)
    else:
        raise AssertionError("unknown config key accepted")

    bench = json.loads(
        cp.run_bench(
            'methods = ["callosum", "scratch"]\nseeds = [0]\nunlearn_rate = 0.17\nbound_report = false\n'
            '[dataset]\nkind = "synthetic"\nnodes = 12\ntimesteps = 120\nseed = 3\ndiffusion = 0.3\n'
            "[pipeline]" + SMALL.replace("\n[", "\n[pipeline.")
        )
    )
    assert bench["seeds"][0]["certificate"]["valid"]
    print("smoke test passed, callosum_py", cp.__version__)


if __name__ == "__main__":
    sys.exit(main())
