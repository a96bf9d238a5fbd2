"""A full-width model pruned to the weight count of a narrower dense model, against that dense model."""

from _common import parser, score_row, write_rows

from gatedcap import experiments as ex

p = parser(__doc__)
p.add_argument("--width", type=float, default=0.25, help="width multiple of the small dense model")
args = p.parse_args()
s = ex.matched_sparsity(args.width)
rows = []
for seed in args.seeds:
    rows.append(score_row(model=f"dense x{args.width}", seed=seed, score=ex.dense(seed, width=args.width)
                          .scores["stage2"]))
    rows.append(score_row(model=f"gated s={s:.4f}", seed=seed, score=ex.gated(s, seed).scores["stage2"]))
write_rows(rows, args.out)
