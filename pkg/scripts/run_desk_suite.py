"""Desk-scale experiment suite on MNIST: headline, convergence, random ticket, compactness.

Writes one CSV per experiment into --out-dir and prints mean +- std per arm.
Ticket stores are built once per model seed and cached as .ticket.json files.

    python scripts/run_desk_suite.py --data data/mnist-sample --out-dir results
"""

import argparse
import logging
from pathlib import Path

import numpy as np

from dpltm import data_io, experiments as ex


def store_for(cfg, data, cache: Path):
    path = cache / f"mnist-seed{cfg.seed_model}{data_io.TICKET_SUFFIX}"
    if path.exists():
        return data_io.load_ticket_store(path)
    store = ex.build_tickets(cfg, *data)
    data_io.save_ticket_store(store, path)
    return store


def summarize(title, rows):
    finals = [r for r in rows if r["epoch"] == "final"]
    print(title)
    for mode in sorted({r["mode"] for r in finals}):
        accs = [r["test_accuracy"] for r in finals if r["mode"] == mode]
        m, s = ex.mean_std(accs)
        print(f"  {mode:14s} {m:.4f} +- {s:.4f}  (n={len(accs)})")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", help="MNIST IDX directory (default: mlxtend sample)")
    p.add_argument("--out-dir", default="results")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epsilons", default="1,0.25")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = (ex.DataSpec(kind="idx", path=args.data, name="mnist", n_classes=10, max_train_rows=10_000)
            if args.data else ex.DataSpec(max_train_rows=10_000))
    data = ex.load_data(spec)
    seeds = range(args.seeds)

    def cfg(seed_model, seed_privacy, eps):
        return ex.desk_config(data=spec, seed_model=seed_model, seed_privacy=seed_privacy, epsilon=eps)

    stores = {s: store_for(cfg(s, s, 1.0), data, out) for s in seeds}

    rows = []
    for eps in [float(e) for e in args.epsilons.split(",")]:
        for s in seeds:
            c = cfg(s, s, eps)
            if eps == 1.0:
                conv = ex.run_convergence(c, (0.3,), data, stores[s])
                rows += conv.rows
                for arm in ("dpltm", "dpsgd"):
                    e, acc, spent = conv.extra["checkpoints"][(arm, 0.3)]
                    print(f"seed {s} {arm}: eps<=0.3 reached at epoch {e}, accuracy {acc:.4f}")
            else:
                rows += ex.run_dpltm(c, data, stores[s]).rows + ex.run_dpsgd_baseline(c, data).rows
        summarize(f"eps={eps:g}", [r for r in rows if r["epsilon_total"] == eps and "ckpt" not in r["run_id"]])
    ex.write_csv(rows, out / "headline.csv")

    rnd = []
    for i in range(5):
        rnd += ex.run_random_ticket(cfg(i % args.seeds, i, 0.2), data, stores[i % args.seeds]).rows
    summarize("random ticket, eps=0.2", rnd)
    ex.write_csv(rnd, out / "random_ticket.csv")

    fracs = [r["winner_fraction"] for r in rows if r["mode"] == "dpltm" and r["epoch"] == "final"]
    print(f"winner fractions: {np.round(fracs, 4).tolist()}")


if __name__ == "__main__":
    main()
