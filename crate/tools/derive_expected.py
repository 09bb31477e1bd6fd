#!/usr/bin/env python3
"""Independent recomputation of the worked-example constants asserted in the
test suite.

Every closed-form value frozen in the Rust tests (partial-loss values,
Dempster-Shafer fusion outputs, Dirichlet round trips, optimizer recursions,
metric toys, special-function references) is derived here from first
principles with mpmath/fractions, so the tests never assert a number that was
produced by the implementation under test.

Run:  python3 tools/derive_expected.py
      python3 tools/derive_expected.py --emit-gamma-grid > crates/core/tests/data/gamma_refs.csv
"""

import argparse
import sys
from fractions import Fraction

import mpmath as mp

mp.mp.dps = 50  # 50 decimal digits; far beyond f64


def show(name, value):
    if isinstance(value, Fraction):
        print(f"{name:44s} = {value} = {float(value):.17g}")
    else:
        print(f"{name:44s} = {mp.nstr(mp.mpf(value), 20)}")


def partial_mse_example():
    # One labeled pixel, K=2, y=(1,0), evidence e=(1,0).
    # alpha = e+1 = (2,1), S = 3, p = alpha/S = (2/3, 1/3).
    # loss = sum_j (y_j - p_j)^2 + p_j(1-p_j)/(S+1), averaged over 1 pixel.
    y = [Fraction(1), Fraction(0)]
    alpha = [Fraction(2), Fraction(1)]
    S = sum(alpha)
    p = [a / S for a in alpha]
    mse = sum((yj - pj) ** 2 for yj, pj in zip(y, p))
    var = sum(pj * (1 - pj) / (S + 1) for pj in p)
    show("partial_mse worked example (exact)", mse + var)


def partial_kl_example():
    # K=2, labeled class 0, alpha=(5,3) -> adjusted alpha_hat=(1,3).
    # KL(Dir(alpha_hat) || Dir(1)) with the log-gamma/digamma expansion.
    a = [mp.mpf(1), mp.mpf(3)]
    s = sum(a)
    k = len(a)
    kl = (
        mp.loggamma(s)
        - mp.loggamma(k)
        - sum(mp.loggamma(x) for x in a)
        + sum((x - 1) * (mp.digamma(x) - mp.digamma(s)) for x in a)
    )
    show("partial_kl worked example", kl)
    show("  closed form ln(3) - 2/3", mp.log(3) - mp.mpf(2) / 3)


def fusion_example():
    # K=2, opinion 1: b=(0.6,0), u=0.4; opinion 2: b=(0,0.6), u=0.4.
    b1 = [Fraction(3, 5), Fraction(0)]
    u1 = Fraction(2, 5)
    b2 = [Fraction(0), Fraction(3, 5)]
    u2 = Fraction(2, 5)
    conflict = sum(
        b1[n] * b2[m] for n in range(2) for m in range(2) if n != m
    )
    scale = 1 / (1 - conflict)
    bf = [scale * (b1[j] * b2[j] + b1[j] * u2 + b2[j] * u1) for j in range(2)]
    uf = scale * u1 * u2
    show("fusion conflict C", conflict)
    show("fused belief b[0]", bf[0])
    show("fused belief b[1]", bf[1])
    show("fused uncertainty u", uf)
    assert sum(bf) + uf == 1

    # Dirichlet view of the fused opinion: e = K b/u, S = K/u, alpha = e+1,
    # p = alpha/S.
    K = 2
    ef = [K * b / uf for b in bf]
    Sf = K / uf
    af = [e + 1 for e in ef]
    pf = [a / Sf for a in af]
    show("fused evidence e[0]", ef[0])
    show("fused strength S", Sf)
    show("fused alpha[0]", af[0])
    show("fused prob p[0]", pf[0])


def evidence_example():
    # K=4, one pixel with evidence (3,0,0,0).
    e = [Fraction(3), Fraction(0), Fraction(0), Fraction(0)]
    K = 4
    alpha = [x + 1 for x in e]
    S = sum(alpha)
    b = [x / S for x in e]
    u = Fraction(K) / S
    p = [a / S for a in alpha]
    show("evidence example S", S)
    show("evidence example b[0]", b[0])
    show("evidence example u", u)
    show("evidence example p[0]", p[0])
    show("evidence example p[1]", p[1])
    assert sum(b) + u == 1 and sum(p) == 1


def zero_logit_closed_form():
    # Network head initialized to zero: raw = 0 everywhere, so evidence is
    # softplus(0) = ln 2 per class, alpha = 1 + ln2, S = K(1 + ln2),
    # u = K/S = 1/(1 + ln2), p uniform.
    ln2 = mp.log(2)
    show("softplus(0) = ln 2", ln2)
    show("zero-logit uncertainty 1/(1+ln2)", 1 / (1 + ln2))


def sgd_recursion():
    # Quadratic f(w) = w^2/2, grad = w. lr=0.1, momentum=0.9, wd=0, w0=1.
    # v <- m v + g ; w <- w - lr v
    lr, m, w = Fraction(1, 10), Fraction(9, 10), Fraction(1)
    v = Fraction(0)
    for step in range(1, 3):
        v = m * v + w
        w = w - lr * v
        show(f"sgd step {step}: v", v)
        show(f"sgd step {step}: w", w)
    # With weight decay: wd=0.1, same quadratic, one step from w0=1.
    lr, m, wd, w, v = Fraction(1, 10), Fraction(9, 10), Fraction(1, 10), Fraction(1), Fraction(0)
    v = m * v + (w + wd * w)
    w = w - lr * v
    show("sgd wd step 1: v", v)
    show("sgd wd step 1: w", w)


def metric_toys():
    # Dice: pred has 4 px of the class, truth has 4 px, overlap 2.
    show("dice toy 2*2/(4+4)", Fraction(4, 8))
    # ASSD: two single-pixel surfaces at (0,0) and (3,4).
    show("assd toy distance", Fraction(5))
    # ECE: one bin, confidence 0.9, accuracy 0.6.
    show("ece toy |0.6-0.9|", Fraction(3, 10))
    # Uniform partial cross entropy at p=1/K for K=4.
    show("pce uniform ln(4)", mp.log(4))


def dropout_moments():
    # Inverted dropout at rate r keeps each entry with prob 1-r and scales
    # survivors by 1/(1-r): E[out] = in, survivor fraction -> 1-r.
    show("dropout keep fraction (rate 0.5)", Fraction(1, 2))


def digamma_spot_checks():
    show("digamma(1) = -euler_gamma", mp.digamma(1))
    show("digamma(0.5)", mp.digamma(mp.mpf("0.5")))
    show("digamma(100)", mp.digamma(100))
    show("loggamma(0.5) = ln sqrt(pi)", mp.loggamma(mp.mpf("0.5")))
    show("trigamma(1) = pi^2/6", mp.polygamma(1, 1))
    show("trigamma(3.5)", mp.polygamma(1, mp.mpf("3.5")))


def emit_gamma_grid():
    # 100-point reference grid on (0, 100]: digamma, log-gamma, trigamma.
    # Points chosen to cover the small-argument region densely plus the
    # integer/half-integer lattice up to 100.
    pts = []
    pts += [mp.mpf(k) / 20 for k in range(1, 41)]          # 0.05 .. 2.00
    pts += [mp.mpf(2) + mp.mpf(k) / 4 for k in range(1, 33)]  # 2.25 .. 10.0
    pts += [mp.mpf(10) + mp.mpf(3 * k) for k in range(1, 29)]  # 13 .. 94
    pts = pts[:97] + [mp.mpf("97.5"), mp.mpf("99.25"), mp.mpf(100)]
    assert len(pts) == 100
    print("# x,digamma,log_gamma,trigamma  (50-digit mpmath, rounded to f64)")
    for x in pts:
        print(
            f"{mp.nstr(x, 17)},{mp.nstr(mp.digamma(x), 17)},"
            f"{mp.nstr(mp.loggamma(x), 17)},{mp.nstr(mp.polygamma(1, x), 17)}"
        )


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--emit-gamma-grid", action="store_true")
    args = ap.parse_args()
    if args.emit_gamma_grid:
        emit_gamma_grid()
        return
    partial_mse_example()
    partial_kl_example()
    fusion_example()
    evidence_example()
    zero_logit_closed_form()
    sgd_recursion()
    metric_toys()
    dropout_moments()
    digamma_spot_checks()


if __name__ == "__main__":
    sys.exit(main())
