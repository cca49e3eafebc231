"""Published per-disease test metrics at n = 640 and an exact integer search over confusion matrices."""

import numpy as np

N_TEST = 640

# disease: accuracy, precision, recall, f1, auc (five decimals, as printed)
ROWS = {
    "DN": ("0.97344", "0.89189", "0.71739", "0.79518", "0.93698"),
    "ODC": ("0.92500", "0.78667", "0.64835", "0.71084", "0.94069"),
    "TSLN": ("0.95469", "0.87500", "0.52830", "0.65882", "0.95789"),
    "ARMD": ("0.97188", "0.74074", "0.64516", "0.68966", "0.93130"),
    "RS": ("0.99375", "0.91667", "0.78571", "0.84615", "0.98095"),
    "ODE": ("0.99531", "1.00000", "0.82353", "0.90323", "0.97857"),
    "ODP": ("0.97188", "0.68750", "0.45833", "0.55000", "0.92100"),
    "DR": ("0.93750", "0.86207", "0.80645", "0.83333", "0.96488"),
    "MH": ("0.93906", "0.82828", "0.78846", "0.80788", "0.96466"),
    "BRVO": ("0.99219", "0.90909", "0.86957", "0.88889", "0.98901"),
    "MYA": ("0.99063", "0.93333", "0.87500", "0.90323", "0.96993"),
    "CRVO": ("0.99688", "1.00000", "0.77778", "0.87500", "0.98679"),
}
AVERAGE = ("0.97018", "0.86927", "0.72700", "0.78852", "0.96022")


def _units(text):
    """'0.97344' -> 97344 (value in units of 1e-5)."""
    whole, frac = text.split(".")
    return int(whole) * 100000 + int(frac.ljust(5, "0"))


def _within(num, den, units):
    # |num/den - units/1e5| <= 0.5e-5, inclusive, in integers
    return np.abs(200000 * num - 2 * units * den) <= den


def exhaustive_confusions(acc, prec, rec, n=N_TEST):
    """Every (tp, fp, fn, tn) with tp+fp+fn+tn == n whose exact ratios round to the printed values."""
    a, p, r = _units(acc), _units(prec), _units(rec)
    out = []
    pos = np.arange(1, n)[:, None]
    tp = np.arange(0, n)[None, :]
    ok = (tp <= pos) & _within(tp, pos, r)
    for ps, t in zip(*np.nonzero(ok)):
        ps, t = int(pos[ps, 0]), int(t)
        fp = np.arange(0, n - ps + 1)
        tn = n - ps - fp
        pred = t + fp
        good = _within(t + tn, n, a)
        with np.errstate(invalid="ignore", divide="ignore"):
            prec_ok = np.where(pred > 0, _within(t, np.maximum(pred, 1), p), p == 0)
        for f in fp[good & prec_ok]:
            out.append((t, int(f), ps - t, int(n - ps - f)))
    return out
