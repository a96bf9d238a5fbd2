"""Stage-1 caption quality for positive and negative initial gate logits."""

from _common import parser, score_row, write_rows

from gatedcap import experiments as ex

p = parser(__doc__)
p.add_argument("--target", type=float, default=0.8, help="target sparsity")
p.add_argument("--inits", type=float, nargs="+", default=[5.0, -5.0], help="initial gate logits")
args = p.parse_args()
rows = [score_row(gate_init=m, seed=seed, score=ex.gated(args.target, seed, gate_init=m, stage2=False)
                  .scores["stage1"])
        for m in args.inits for seed in args.seeds]
write_rows(rows, args.out)
