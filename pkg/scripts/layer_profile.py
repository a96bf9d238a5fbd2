"""Per-layer sparsity of gated models at one target."""

from _common import parser, write_rows

from gatedcap import experiments as ex

p = parser(__doc__)
p.add_argument("--target", type=float, default=0.975, help="target sparsity")
args = p.parse_args()
rows = [{"seed": seed, "layer": name, "sparsity": f"{v:.4f}"}
        for seed in args.seeds
        for name, v in ex.gated(args.target, seed).scores["stage2"].layers.items()]
write_rows(rows, args.out)
