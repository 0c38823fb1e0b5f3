"""Record the regression values pinned by the test suite into tests/fixtures/regression.json.

    python3 scripts/record_fixtures.py            # everything (several minutes)
    python3 scripts/record_fixtures.py --only cheap
"""

import argparse
import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from decoylab.decoygen import default_config, generate_decoy, solo_attack  # noqa: E402
from decoylab.embednet import EmbedNet  # noqa: E402
from decoylab.harness import run_scenario  # noqa: E402
from decoylab.synthpeople import cluster_quality, generate  # noqa: E402
from suite import config  # noqa: E402

FIXTURE = ROOT / "tests" / "fixtures" / "regression.json"


def cheap():
    ds = generate()
    m = EmbedNet.from_seed(1)
    intra, inter = cluster_quality(ds, m)
    x, t = ds.photos[0, 0], m.forward(ds.photos[1, 0])
    d = generate_decoy(x, t, default_config(m, 0.06))
    s = solo_attack(x, default_config(m, 0.04, seed=3))
    return {
        "cluster_quality": {"intra": intra, "inter": inter},
        "decoy_eps_0.06": {"final_loss": d.final_loss, "iterations": d.iterations},
        "solo_eps_0.04": {"final_loss": s.final_loss},
    }


def community():
    rec = run_scenario(config("community"))
    cell = dict(strategy="random-lookup", epsilon=0.06, k=10)
    return {"community_k10": {
        "baseline_recall": rec.metric("recall_mean", decoy_ratio=0.0, **cell),
        "baseline_idunif": rec.metric("idunif_mean", decoy_ratio=0.0, **cell),
        "recall": rec.metric("recall_mean", decoy_ratio=4.0, **cell),
        "idunif": rec.metric("idunif_mean", decoy_ratio=4.0, **cell),
    }}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--only", choices=("cheap", "community"))
    args = p.parse_args()
    data = json.loads(FIXTURE.read_text()) if FIXTURE.exists() else {}
    if args.only in (None, "cheap"):
        data.update(cheap())
    if args.only in (None, "community"):
        data.update(community())
    FIXTURE.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    print(json.dumps(data, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
