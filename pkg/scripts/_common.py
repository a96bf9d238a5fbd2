"""Small helpers shared by the experiment scripts."""

import argparse
import csv
import sys
from pathlib import Path


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="run seeds")
    p.add_argument("--out", default=None, help="CSV output (default: stdout)")
    return p


def write_rows(rows: list[dict], out: str | None) -> None:
    if not rows:
        return
    fh = open(Path(out), "w", newline="") if out else sys.stdout
    w = csv.DictWriter(fh, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)
    if out:
        fh.close()


def score_row(**head) -> dict:
    s = head.pop("score")
    return {**head, "sparsity": f"{s.sparsity:.4f}", "b4": f"{s.bleu4:.4f}", "token_acc": f"{s.token_acc:.4f}",
            "uniqueness_pct": f"{s.uniqueness_pct:.1f}", "avg_len": f"{s.avg_len:.2f}"}
