"""Gated pruning against gradual and one-shot magnitude pruning at several sparsities."""

from _common import parser, score_row, write_rows

from gatedcap import experiments as ex

p = parser(__doc__)
p.add_argument("--targets", type=float, nargs="+", default=[0.975], help="target sparsities")
p.add_argument("--schemes", nargs="+", default=["class_blind", "class_uniform", "class_distribution"],
               help="one-shot pruning variants")
args = p.parse_args()
rows = []
for seed in args.seeds:
    rows.append(score_row(method="dense", target=0.0, seed=seed, score=ex.dense(seed).scores["stage2"]))
    for s in args.targets:
        g = ex.gated(s, seed)
        rows.append(score_row(method="gated_stage1", target=s, seed=seed, score=g.scores["stage1"]))
        rows.append(score_row(method="gated", target=s, seed=seed, score=g.scores["stage2"]))
        rows.append(score_row(method="gradual", target=s, seed=seed, score=ex.gradual(s, seed).scores["stage2"]))
        for k in args.schemes:
            rows.append(score_row(method=k, target=s, seed=seed, score=ex.hard(s, seed, k).scores["stage2"]))
write_rows(rows, args.out)
