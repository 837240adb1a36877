"""Command-line entry point: ``dpltm <subcommand> [flags]`` (or ``python -m dpltm``).

Failures exit with status 1 and print one line ``error: {"type": ..., "message": ...}``
to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import data_io, experiments as ex
from .selection import PrivacyLedger, ScoreConfig, select_winner, selection_probabilities


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x)


def _ints(text):
    return tuple(int(x) for x in text.split(",") if x)


def _common(p: argparse.ArgumentParser):
    g = p.add_argument_group("data")
    g.add_argument("--data", help="IDX directory or CSV file")
    g.add_argument("--dataset-kind", default="mnist-sample",
                   choices=["idx", "csv", "synthetic", "mnist-sample"])
    g.add_argument("--dataset-name")
    g.add_argument("--label-column", default="-1", help="CSV label column, by name or index")
    g.add_argument("--no-header", action="store_true", help="CSV file has no header row")
    g.add_argument("--n-classes", type=int)
    g.add_argument("--synthetic", type=_ints, default=(5000, 784, 10), metavar="N,DIM,K")
    g.add_argument("--synthetic-seed", type=int, default=0)
    g.add_argument("--split-seed", type=int, default=0)
    g.add_argument("--scale", choices=["desk", "full"], default="desk",
                   help="desk: <=10,000 training rows and desk defaults; full: published full-scale defaults")
    g.add_argument("--max-train-rows", type=int)

    g = p.add_argument_group("privacy")
    g.add_argument("--epsilon", type=float, default=1.0)
    g.add_argument("--delta", type=float, default=1e-5)
    g.add_argument("--split-fraction", type=float, default=0.9, help="share of epsilon for training")
    g.add_argument("--nu", type=float, default=50.0)

    g = p.add_argument_group("model")
    g.add_argument("--hidden", type=_ints, default=(300, 100), metavar="H1,H2,...")
    g.add_argument("--tickets", type=int, default=12)
    g.add_argument("--ticket-iters", type=int)
    g.add_argument("--epochs", type=int, default=50)
    g.add_argument("--lot", type=int, default=400)
    g.add_argument("--clip", type=float, default=1.0)
    g.add_argument("--lr", type=float, help="private-training learning rate")
    g.add_argument("--ticket-lr", type=float, default=0.1)
    g.add_argument("--prune-rates", type=_floats, metavar="R1,R2,...")
    g.add_argument("--seed-model", type=int, default=0)
    g.add_argument("--seed-privacy", type=int, default=0)
    g.add_argument("--repeats", type=int, default=1, help="independent seed pairs (seed + i)")
    g.add_argument("--out", default="metrics.csv")
    g.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpltm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tickets", help="phase 1: generate lottery tickets")
    _common(p)
    p.add_argument("--store", default="tickets" + data_io.TICKET_SUFFIX)

    p = sub.add_parser("select", help="phase 2: private winner selection")
    _common(p)
    p.add_argument("--store", required=True)

    p = sub.add_parser("train", help="phase 3: private training of a selected ticket")
    _common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--winner", type=int, required=True, help="ticket index from `select`")

    p = sub.add_parser("run", help="all three phases end to end")
    _common(p)
    p.add_argument("--mode", default="dpltm", choices=["dpltm", "dpsgd", "nonprivate", "random_ticket"])
    p.add_argument("--store", help="reuse tickets from this store instead of regenerating")

    p = sub.add_parser("baseline", help="DPSGD on the full network")
    _common(p)

    p = sub.add_parser("convergence", help="per-epoch DPLTM vs DPSGD with epsilon checkpoints")
    _common(p)
    p.add_argument("--checkpoints", type=_floats, default=(0.3,))
    p.add_argument("--store")

    p = sub.add_parser("transfer", help="train privately with a ticket built on public data")
    _common(p)
    p.add_argument("--store", required=True, help="source ticket store")

    p = sub.add_parser("random-ticket", help="EM winner vs uniformly drawn ticket")
    _common(p)
    p.add_argument("--store")
    return parser


def config_from_args(args) -> ex.RunConfig:
    data = ex.DataSpec(kind=args.dataset_kind, path=args.data, name=args.dataset_name,
                       label_column=args.label_column, n_classes=args.n_classes,
                       header=not args.no_header, synthetic_shape=tuple(args.synthetic),
                       synthetic_seed=args.synthetic_seed, split_seed=args.split_seed,
                       max_train_rows=args.max_train_rows)
    kw = dict(epsilon=args.epsilon, delta=args.delta, split_fraction=args.split_fraction,
              tickets=args.tickets, epochs=args.epochs, lot=args.lot, clip=args.clip,
              ticket_lr=args.ticket_lr, nu=args.nu, hidden=tuple(args.hidden),
              prune_rates=args.prune_rates, seed_model=args.seed_model, seed_privacy=args.seed_privacy)
    if args.ticket_iters is not None:
        kw["ticket_iters"] = args.ticket_iters
    if args.lr is not None:
        kw["lr"] = args.lr
    if getattr(args, "mode", None) in ex.MODES:
        kw["mode"] = args.mode
    if args.scale == "desk":
        if data.max_train_rows is None:
            data.max_train_rows = 10_000
        return ex.desk_config(data=data, **kw)
    return ex.RunConfig(data=data, **kw)


def _load_store(path):
    return data_io.load_ticket_store(path) if path else None


def _report(rows, out):
    finals = [r for r in rows if r["epoch"] == "final"]
    for mode in sorted({r["mode"] for r in finals}):
        accs = [r["test_accuracy"] for r in finals if r["mode"] == mode]
        m, s = ex.mean_std(accs)
        print(f"{mode}: test_accuracy {m:.4f} +- {s:.4f} over {len(accs)} run(s)")
    print(f"wrote {len(rows)} rows to {out}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except Exception as e:  # noqa: BLE001 - surfaced as a machine-readable line
        print("error: " + json.dumps({"type": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    base = config_from_args(args)
    cmd = args.command

    if cmd == "select":
        store = data_io.load_ticket_store(args.store)
        eps1, _ = ex.split_budget(base.epsilon, base.split_fraction)
        sel_rng, _ = ex.privacy_streams(base.seed_privacy)
        cfg = ScoreConfig(base.nu, eps1)
        ledger = PrivacyLedger()
        w = select_winner(store.records, cfg, sel_rng, ledger)
        probs = selection_probabilities(store.records, cfg)
        print(json.dumps({"winner": w.index, "fraction": w.fraction, "accuracy": w.accuracy,
                          "epsilon1": ledger.spent(), "probabilities": probs.tolist()}))
        return 0

    data = ex.load_data(base.data)
    if cmd == "tickets":
        store = ex.build_tickets(base, *data)
        data_io.save_ticket_store(store, args.store)
        print(json.dumps({"store": args.store, "tickets": [
            {"index": r.index, "accuracy": r.accuracy, "fraction": r.fraction} for r in store.records]}))
        return 0

    rows = []
    store = _load_store(getattr(args, "store", None)) if cmd != "transfer" else None
    for i in range(args.repeats):
        cfg = replace(base, seed_model=base.seed_model + i, seed_privacy=base.seed_privacy + i)
        if cmd == "train":
            res = ex.train_selected(cfg, data_io.load_ticket_store(args.store), args.winner, data)
        elif cmd == "run":
            res = ex.run_mode(cfg, data, store)
        elif cmd == "baseline":
            res = ex.run_dpsgd_baseline(cfg, data)
        elif cmd == "convergence":
            res = ex.run_convergence(cfg, args.checkpoints, data, store)
            for (arm, c), (epoch, acc, spent) in sorted(res.extra["checkpoints"].items()):
                print(f"seed {i}: {arm} at eps<={c:g}: epoch {epoch}, accuracy {acc:.4f}, spent {spent:.4f}")
        elif cmd == "transfer":
            res = ex.run_transfer(args.store, cfg, data)
        elif cmd == "random-ticket":
            res = ex.run_random_ticket(cfg, data, store)
        else:  # pragma: no cover - argparse restricts choices
            raise ValueError(cmd)
        rows.extend(res.rows)
    ex.write_csv(rows, args.out)
    _report(rows, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
