"""Human-study aggregation: false acceptance of fakes."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass


@dataclass
class HFARResult:
    rate: float  # fake clips whose majority verdict is "real" / fake clips
    micro: float  # "real" verdicts on fakes / all verdicts on fakes
    per_rater: dict


def hfar(responses, ground_truth: dict) -> HFARResult:
    """``responses``: iterable of (rater_id, clip_id, verdict); ``ground_truth``: clip_id -> label (1 = fake).

    A clip counts as accepted when strictly more than half of its verdicts
    are "real".
    """
    votes = defaultdict(list)
    rater = defaultdict(list)
    for r, clip, verdict in responses:
        if clip not in ground_truth:
            raise KeyError(f"response for unknown clip {clip!r}")
        if verdict not in ("real", "fake"):
            raise ValueError(f"bad verdict {verdict!r}")
        if int(ground_truth[clip]) == 1:
            votes[clip].append(verdict == "real")
            rater[r].append(verdict == "real")
    if not votes:
        raise ValueError("no responses on fake clips")
    accepted = sum(sum(v) * 2 > len(v) for v in votes.values())
    all_votes = [x for v in votes.values() for x in v]
    return HFARResult(accepted / len(votes), sum(all_votes) / len(all_votes),
                      {r: sum(v) / len(v) for r, v in sorted(rater.items())})
