"""Build every artifact from the bundled synthetic suite and diagnose a few cases.

Run: python demos/01_train_and_diagnose.py
"""

from orthodoc.config import EngineConfig
from orthodoc.fusion import accuracy, make_examples, predict
from orthodoc.pipeline import build_workspace
from orthodoc.synthetic import bundled_dataset


def main():
    dataset = bundled_dataset()
    print(f"dataset: {dataset}")
    ws = build_workspace(dataset, EngineConfig())

    print(f"\ncorpus: {len(ws.store.documents)} documents chunked into {len(ws.store.passages)} passages")
    communities = len(set(ws.graph.communities.values()))
    print(f"graph: {len(ws.graph.entities)} entities, {len(ws.graph.relations)} relations, {communities} communities")
    print(f"index: {len(ws.index.postings)} distinct terms")

    trace = ws.loss_trace
    print(f"\ntraining on {len(ws.train)} cases: loss {trace[0]:.3f} at start, {trace[-1]:.3f} after "
          f"{len(trace) - 1} epochs")
    print(f"training accuracy {accuracy(ws.weights, make_examples(ws.train, ws.weights)):.3f}")

    # the classifier only sees the case text and the image patches
    print("\nheld-out cases:")
    for case in ws.test[::6]:
        pred = predict(case, ws.weights)
        runner, p2 = pred.runner_up()
        mark = "ok " if pred.predicted == case.ground_truth else "MISS"
        print(f"  {mark} {case.case_id:<24} -> {pred.predicted:<22} p={pred.probability:.2f} "
              f"(next: {runner} {p2:.2f})")


if __name__ == "__main__":
    main()
