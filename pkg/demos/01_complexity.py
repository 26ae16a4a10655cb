"""How much do the extra attention paths cost?

Walks through the symbolic attention cost, the parameter / FLOP budgets of
the named presets, the stage and rate ablations, and how attention cost
grows with image size.  Pure arithmetic, runs in about a second.

    python3 demos/01_complexity.py
"""
from lgtransformer.analysis import attention_cost, count_flops, dense_attention_flops, linearity_check, overhead_ratio
from lgtransformer.model import ablation, preset

# A path downsampled by r sees hw / r^2 tokens, so for fixed C and M its
# attention cost shrinks by r^2.  Summing the identity path with 2x and 4x
# paths therefore costs 1 + 1/4 + 1/16 times a single path.
for paths in ([1], [1, 2], [1, 2, 4]):
    print(f"paths {paths!s:<10} cost {attention_cost(paths)!s:<28} ratio {overhead_ratio(paths):g}")
print()

for name in ("swin_t_equiv", "lg_t", "lg_s"):
    rep = count_flops(preset(name))
    print(f"{name:<13} {rep.total_params / 1e6:6.2f}M params  {rep.total_flops / 1e9:6.3f}G MACs at 224x224")
print()

# where does the overhead come from?  add extra paths stage by stage, then by rate
base = count_flops(preset("swin_t_equiv"))
variants = [((1,), True, True), ((1, 2), True, True), ((1, 2, 3), True, True),
            ((1, 2, 3), True, False), ((1, 2, 3), False, True)]
for stages, p16, p32 in variants:
    rep = count_flops(ablation(stages, p16, p32))
    print(f"{rep.model:<32} +{(rep.total_params - base.total_params) / 1e6:5.2f}M  "
          f"+{(rep.total_flops - base.total_flops) / 1e9:5.3f}G")
print()

# windowed attention is linear in the number of tokens; dense attention is quadratic
cfg = preset("lg_t")
fit = linearity_check(cfg, [112, 224, 448])
print(f"windowed attention MACs vs hw: R^2 = {fit.r2:.6f}")
for side in (112, 224, 448):
    win = count_flops(cfg, (side, side)).attention_flops()
    dense = dense_attention_flops(cfg, (side, side))
    print(f"  {side:>3}px  windowed {win / 1e9:7.3f}G   dense {dense / 1e9:9.3f}G")
