"""Independent high-precision reference values for the PK unit tests.

Run: python3 tests/oracles/pk_oracle.py
Values printed here are frozen into tests/test_pksim.cpp and the acceptance binary.
"""
from mpmath import mp, mpf, exp, log

mp.dps = 40

D, KA, TLAG, V0 = mpf(300), mpf("0.502"), mpf("0.346"), mpf(3726)


def clearance(snp, age, alb, hgb, eta=0):
    return (mpf("26.2") * mpf(snp) ** mpf("0.71") * (mpf(age) / 47) ** mpf("-0.26")
            * (mpf(alb) / mpf("4.1")) ** mpf("0.35") * (mpf(hgb) / 125) ** mpf("-0.29") * exp(eta))


def conc(cl, v, t):
    ke = cl / v
    tau = mpf(t) - TLAG
    if tau <= 0:
        return mpf(0)
    return D / v * KA / (KA - ke) * (exp(-ke * tau) - exp(-KA * tau))


def t_peak(cl, v):
    ke = cl / v
    return TLAG + log(KA / ke) / (KA - ke)


cl = mpf("26.2")
print("clearance(snp=3)      =", mp.nstr(clearance(3, 47, "4.1", 125), 20))
print("volume(eta=-0.653)    =", mp.nstr(V0 * exp(mpf("-0.653")), 20))
print("C(12 h), canonical    =", mp.nstr(conc(cl, V0, 12), 20))
print("t_peak, canonical     =", mp.nstr(t_peak(cl, V0), 20))
print("C(24 h), canonical    =", mp.nstr(conc(cl, V0, 24), 20))
