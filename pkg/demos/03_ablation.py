"""Switch graph expansion and section planning off, one at a time, and compare.

Run: python demos/03_ablation.py
"""

from orthodoc.config import EngineConfig
from orthodoc.evaluation import Variant, ablation_comparisons, ablation_run, ablation_tables
from orthodoc.pipeline import build_workspace
from orthodoc.synthetic import bundled_dataset


def main():
    cfg = EngineConfig()
    ws = build_workspace(bundled_dataset(), cfg)
    results = ablation_run(ws, cfg)

    print(f"{'variant':<18} {'complete':>9} {'coherent':>9} {'relevant':>9} {'factual':>8} {'OQS':>6}")
    for variant in (Variant(), Variant(rag=False), Variant(cot=False)):
        q = results[variant].quality
        print(f"{variant.name:<18} {q.completeness:9.3f} {q.coherence:9.3f} {q.content_relevance:9.3f} "
              f"{q.factual_correctness:8.3f} {q.oqs:6.2f}")

    print("\npaired bootstrap, base minus ablated (95% interval):")
    for name, metrics in ablation_comparisons(results, cfg.bootstrap_resamples).items():
        c = metrics["completeness"]
        print(f"  {name}: completeness {c['mean_diff']:+.3f} [{c['ci_low']:+.3f}, {c['ci_high']:+.3f}]")

    # user satisfaction needs a ratings file, so that column shows "--"
    for name, tex in ablation_tables(results).items():
        print(f"\n% {name}\n{tex}", end="")


if __name__ == "__main__":
    main()
