"""Cause-of-death category taxonomy.

Seven main categories are estimated, with hypertension (``HYP``) as the
reference category for every log-ratio. Hemorrhage, sepsis and other direct
causes are further split into ten subcategories; deaths that carry a main
cause but no usable subcause land in the ``*_unknown_*`` sentinels.
"""

from enum import Enum


class CauseCategory(str, Enum):
    ABO = "ABO"
    EMB = "EMB"
    HEM = "HEM"
    SEP = "SEP"
    DIR = "DIR"
    IND = "IND"
    HYP = "HYP"
    HEM_ante = "HEM_ante"
    HEM_intra = "HEM_intra"
    HEM_post = "HEM_post"
    SEP_ante = "SEP_ante"
    SEP_intra = "SEP_intra"
    SEP_post = "SEP_post"
    DIR_obs = "DIR_obs"
    DIR_ane = "DIR_ane"
    DIR_obt = "DIR_obt"
    DIR_oth = "DIR_oth"
    HEM_unknown_timing = "HEM_unknown_timing"
    SEP_unknown_timing = "SEP_unknown_timing"
    DIR_unknown_sub = "DIR_unknown_sub"

    def __str__(self):
        return self.value


# Reference category is last so that model index J-1 is always the reference.
MAIN = ("ABO", "EMB", "HEM", "SEP", "DIR", "IND", "HYP")
REFERENCE = "HYP"

SUB = {
    "HEM": ("HEM_ante", "HEM_intra", "HEM_post"),
    "SEP": ("SEP_ante", "SEP_intra", "SEP_post"),
    "DIR": ("DIR_obs", "DIR_ane", "DIR_obt", "DIR_oth"),
}
UNKNOWN_SUB = {
    "HEM": "HEM_unknown_timing",
    "SEP": "SEP_unknown_timing",
    "DIR": "DIR_unknown_sub",
}
SUBCAUSES = tuple(s for subs in SUB.values() for s in subs)
ESTIMATED = MAIN + SUBCAUSES

_PARENT = {s: m for m, subs in SUB.items() for s in subs}
_PARENT.update({s: m for m, s in UNKNOWN_SUB.items()})


def parent(label):
    """Main category of a main, sub or sentinel label."""
    label = str(label)
    if label in MAIN:
        return label
    try:
        return _PARENT[label]
    except KeyError:
        raise ValueError(f"not a cause category: {label!r}") from None


def is_label(label):
    return str(label) in CauseCategory._value2member_map_


def is_subcause(label):
    return str(label) in SUBCAUSES


def is_sentinel(label):
    return str(label) in UNKNOWN_SUB.values()
