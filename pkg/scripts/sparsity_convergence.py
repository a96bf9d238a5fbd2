"""Final ML sparsity against the sparsity-loss weight at a fixed target."""

from _common import parser, score_row, write_rows

from gatedcap import experiments as ex
from gatedcap import gates as gt

p = parser(__doc__)
p.add_argument("--target", type=float, default=0.9, help="target sparsity")
p.add_argument("--lambdas", type=float, nargs="+", default=None,
               help="sparsity-loss weights (default: heuristic value and 1/5 of it)")
args = p.parse_args()
lams = args.lambdas or [gt.lambda_heuristic(args.target), gt.lambda_heuristic(args.target) / 5]
rows = [score_row(lambda_s=lam, seed=seed, score=ex.gated(args.target, seed, lambda_s=lam, stage2=False)
                  .scores["stage1"])
        for lam in lams for seed in args.seeds]
write_rows(rows, args.out)
