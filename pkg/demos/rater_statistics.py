"""Compare radiologists' error counts with the model's using Fisher's exact test.

Ten radiologists and the model each read the same 180 CT cases. The model made 7
mistakes. A small p-value means the radiologist's error rate differs from the model's.

Run:  python demos/rater_statistics.py
"""
from strokeseg.metrics import accuracy, fisher_exact

MODEL_ERRORS = 7
N = 180
RADIOLOGISTS = [6, 15, 8, 19, 33, 23, 25, 18, 19, 19]


def main():
    truth = ["ischemic"] * 60 + ["hemorrhagic"] * 60 + ["healthy"] * 60
    pred = ["healthy"] * MODEL_ERRORS + truth[MODEL_ERRORS:]
    print(f"model: {MODEL_ERRORS} errors, accuracy {accuracy(truth, pred):.4f}")
    print(f"{'rater':>5} {'errors':>6} {'p-value':>8}  verdict")
    for i, e in enumerate(RADIOLOGISTS, 1):
        p = fisher_exact(e, MODEL_ERRORS, N).p_value
        verdict = "model better" if p < 0.05 and e > MODEL_ERRORS else "on par"
        print(f"{i:>5} {e:>6} {p:>8.4f}  {verdict}")


if __name__ == "__main__":
    main()
