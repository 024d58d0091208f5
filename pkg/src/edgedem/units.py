"""dB / dBm / linear conversions. Every power conversion in the package goes through here."""

import numpy as np


def db_to_linear(db):
    return np.power(10.0, np.asarray(db, dtype=float) / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(np.asarray(x, dtype=float))


def dbm_to_watt(dbm):
    return np.power(10.0, (np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def watt_to_dbm(watt):
    return 10.0 * np.log10(np.asarray(watt, dtype=float)) + 30.0


def kb_to_bits(kb):
    # KB = 1000 bytes
    return np.asarray(kb, dtype=float) * 8000.0
