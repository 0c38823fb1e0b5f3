"""Run the seeded scenario suite and write one report directory per scenario.

    python3 scripts/run_suite.py --out runs                 # acceptance-sized suite
    python3 scripts/run_suite.py --only transfer --full     # scenario defaults instead
"""

import argparse
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from decoylab.harness import compare_strategies, emit_report, run_scenario, scenario_defaults  # noqa: E402
from suite import SUITE, config  # noqa: E402


@dataclass
class Plan:
    out: Path = Path("runs")
    names: list[str] = field(default_factory=lambda: [n for n in SUITE if n != "determinism"])
    full: bool = False
    seed: int | None = None


def scenario_config(plan: Plan, name: str):
    extra = {} if plan.seed is None else {"seed": plan.seed}
    if plan.full:
        return scenario_defaults(SUITE[name][0], **extra)
    return config(name, **extra)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--only", nargs="+", choices=sorted(SUITE))
    p.add_argument("--full", action="store_true", help="use each scenario's full default grid")
    p.add_argument("--seed", type=int)
    args = p.parse_args(argv)
    plan = Plan(args.out, args.only or Plan().names, args.full, args.seed)
    for name in plan.names:
        t0 = time.perf_counter()
        rec = run_scenario(scenario_config(plan, name))
        files = emit_report(rec, plan.out / name)
        print(f"{name}: {len(rec.reports)} cells, {rec.n_decoys} attacked photos, {rec.violations} violations, "
              f"{time.perf_counter() - t0:.0f}s, {len(files)} files")
        if len({r.key["strategy"] for r in rec.reports}) > 1:
            for row in compare_strategies([rec]):
                if row["k"] == 10 and row["decoy_ratio"] > 0:
                    print(f"  k=10 ratio={row['decoy_ratio']:g} #{row['rank']} {row['strategy']:<14} "
                          f"dDR={row['discovery_delta']:+.3f} dRP={row['recall_delta']:+.3f}")


if __name__ == "__main__":
    main()
