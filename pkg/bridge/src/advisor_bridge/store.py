"""Feedback store and bucket-override adaptation.

Mirrors the in-process advisor's adaptation rule: a bucket earns an override
once enough of its feedback samples agree on the executed action and those
samples' mean episode return beats a baseline. The in-process advisor
baselines on episodes where its advice was followed; the bridge only ever
hears about disagreements, so its baseline is the mean return over the
distinct episodes it has seen.
"""

import logging

from .rules import ACTION_NAMES, bucket_of, check_obs

log = logging.getLogger("advisor_bridge")

ACTION_INDEX = {name: i for i, name in enumerate(ACTION_NAMES)}


class FeedbackStore:
    def __init__(self, adapt_threshold: int = 3):
        if adapt_threshold < 1:
            raise ValueError("adapt_threshold must be >= 1")
        self.adapt_threshold = adapt_threshold
        # (bucket, executed action index, episode, episode return)
        self.samples: list[tuple[tuple, int, int, float]] = []
        self.episode_returns: dict[int, float] = {}
        self.overrides: dict[tuple, int] = {}

    def add(self, sample) -> str | None:
        """Ingest one feedback sample and refresh the override table.

        Returns a warning string when the sample is unusable (it is then
        ignored); None when it was stored.
        """
        if not isinstance(sample, dict):
            return "feedback sample is not an object"
        problem = check_obs(sample.get("obs"))
        if problem is not None:
            return f"feedback sample ignored: {problem}"
        executed = ACTION_INDEX.get(sample.get("executed"))
        if executed is None:
            return f"feedback sample ignored: unknown action {sample.get('executed')!r}"
        episode = sample.get("episode")
        ret = sample.get("return_env")
        if isinstance(episode, bool) or not isinstance(episode, int):
            return "feedback sample ignored: episode is not an integer"
        if isinstance(ret, bool) or not isinstance(ret, (int, float)):
            return "feedback sample ignored: return_env is not a number"
        self.samples.append((bucket_of(sample["obs"]), executed, episode,
                             float(ret)))
        self.episode_returns[episode] = float(ret)
        self.overrides = self._adapt()
        return None

    def _adapt(self) -> dict[tuple, int]:
        if not self.episode_returns:
            return {}
        baseline = sum(self.episode_returns.values()) / len(self.episode_returns)
        grouped: dict[tuple, dict[int, list[float]]] = {}
        for key, executed, _, ret in self.samples:
            grouped.setdefault(key, {}).setdefault(executed, []).append(ret)
        table = {}
        for key, by_action in grouped.items():
            # most frequent qualifying action; ties resolve to the lowest index
            best = None
            for action in sorted(by_action):
                returns = by_action[action]
                if len(returns) < self.adapt_threshold:
                    continue
                if sum(returns) / len(returns) <= baseline:
                    continue
                if best is None or len(returns) > len(by_action[best]):
                    best = action
            if best is not None:
                table[key] = best
        return table
