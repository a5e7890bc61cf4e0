"""Tour of the tape-based autodiff engine.

Build tensors, record a computation on a tape, run the backward pass, check
one gradient by hand, and then let the built-in finite-difference checker
audit a small network end to end.

Run: python3 demos/01_autodiff_basics.py
"""

import numpy as np

import eastlab.tensor as T


def main():
    rng = np.random.default_rng(0)

    # --- a scalar chain, differentiated by hand and by tape ---------------
    # y = sum(softmax(W x)) is constant (=1) in x, so dW must be zero; swap
    # in log-softmax and the gradients come alive. Tapes record every op
    # executed inside the context; backward walks them in reverse.
    w = T.parameter(rng.standard_normal((3, 3)), dtype=np.float64)
    x = T.tensor(rng.standard_normal((3, 1)), dtype=np.float64)

    with T.Tape() as tape:
        logits = T.matmul(w, x)
        y = T.sum_all(T.softmax_lastdim(T.transpose(logits, (1, 0))))
    tape.backward(y)
    print("softmax head sums to", float(y.values))
    print("max |dW| for the constant objective:", np.abs(w.grad).max())

    w.grad = None
    with T.Tape() as tape:
        logits = T.matmul(w, x)
        y = T.mean_all(T.log_softmax_lastdim(T.transpose(logits, (1, 0))))
    tape.backward(y)
    print("max |dW| for mean log-softmax:   ", np.abs(w.grad).max())

    # --- one gradient checked by hand --------------------------------------
    # f(a) = sum(a * a) has df/da = 2a exactly.
    a = T.parameter(rng.standard_normal((4,)), dtype=np.float64)
    with T.Tape() as tape:
        f = T.sum_all(T.mul(a, a))
    tape.backward(f)
    print("\nhand check  d sum(a*a)/da == 2a :",
          np.allclose(a.grad, 2 * a.values, rtol=0, atol=0))

    # --- the auditor --------------------------------------------------------
    # finite_difference_check perturbs every named leaf (64-bit only) and
    # compares central differences against the tape's gradients.
    params = {
        "w1": T.parameter(rng.standard_normal((5, 4)), dtype=np.float64),
        "gain": T.parameter(np.ones(5), dtype=np.float64),
        "w2": T.parameter(rng.standard_normal((2, 5)), dtype=np.float64),
    }
    v = rng.standard_normal((4, 1))

    def objective():
        h = T.matmul(params["w1"], T.tensor(v, dtype=np.float64))
        h = T.rmsnorm(T.transpose(h, (1, 0)), params["gain"])
        out = T.matmul(params["w2"], T.transpose(h, (1, 0)))
        return T.mean_all(T.log_softmax_lastdim(T.transpose(out, (1, 0))))

    report = T.finite_difference_check(objective, params, h=1e-5, tol=1e-4)
    print(f"\nfinite-difference audit over {len(report.entries)} parameter "
          f"blocks: {report.summary()}")


if __name__ == "__main__":
    main()
