"""Toy verifiable-reward environments.

Each task owns its vocabulary, draws prompts from a seeded generator, and
scores a completion with a pure reward in [0, 1].
"""

from __future__ import annotations

import itertools

import numpy as np

from .mdm import TokenSequence, Vocabulary

TASK_IDS = ("copy_reverse", "mini_countdown", "mini_sudoku")


class Task:
    id = "abstract"
    max_reward = 1.0

    vocab: Vocabulary
    prompt_len: int
    completion_len: int

    @property
    def seq_len(self) -> int:
        return self.prompt_len + self.completion_len

    def sample_prompt(self, rng: np.random.Generator) -> TokenSequence:
        raise NotImplementedError

    def reward(self, prompt: TokenSequence, completion) -> float:
        raise NotImplementedError

    def solution(self, prompt: TokenSequence) -> tuple:
        raise NotImplementedError

    def is_solved(self, prompt: TokenSequence, completion) -> bool:
        return self.reward(prompt, completion) == self.max_reward

    @staticmethod
    def _completion(prompt: TokenSequence, completion) -> tuple:
        if isinstance(completion, TokenSequence):
            return completion.completion
        return tuple(int(t) for t in completion)


class CopyReverse(Task):
    """Emit the prompt reversed; reward is the fraction of matching positions."""

    id = "copy_reverse"

    def __init__(self, vocab_size: int = 8, length: int = 8):
        self.vocab = Vocabulary(vocab_size)
        self.prompt_len = self.completion_len = length

    def sample_prompt(self, rng):
        toks = rng.integers(0, self.vocab.size, self.prompt_len)
        return TokenSequence(toks, self.prompt_len)

    def solution(self, prompt):
        return tuple(reversed(prompt.prompt))

    def reward(self, prompt, completion):
        comp = self._completion(prompt, completion)
        target = self.solution(prompt)
        if len(comp) != len(target):
            return 0.0
        return sum(a == b for a, b in zip(comp, target)) / len(target)


class MiniCountdown(Task):
    """Combine three operands with + and - to hit a target.

    Tokens: digits 0-9 are ids 0-9, ``+`` is 10, ``-`` is 11. Prompt is
    ``a b c T_tens T_units``; completion is ``n op n op n`` evaluated left to
    right. Reward 1.0 if it uses exactly the given operands and hits the
    target, 0.1 for any other well-formed expression, 0.0 if malformed.
    """

    id = "mini_countdown"
    PLUS, MINUS = 10, 11

    def __init__(self):
        self.vocab = Vocabulary(12)
        self.prompt_len = 5
        self.completion_len = 5

    def sample_prompt(self, rng):
        while True:
            ops = rng.integers(1, 10, 3)
            signs = rng.integers(0, 2, 2)
            order = rng.permutation(3)
            target = self._evaluate(ops[order], [self.PLUS if s else self.MINUS for s in signs])
            if 0 <= target <= 27:
                break
        toks = [int(o) for o in ops] + [target // 10, target % 10]
        return TokenSequence(toks, self.prompt_len)

    @classmethod
    def _evaluate(cls, nums, ops) -> int:
        val = int(nums[0])
        for op, n in zip(ops, nums[1:]):
            val = val + int(n) if op == cls.PLUS else val - int(n)
        return val

    def target(self, prompt) -> int:
        p = prompt.prompt
        return 10 * p[3] + p[4]

    def solution(self, prompt):
        p = prompt.prompt
        for perm in itertools.permutations(p[:3]):
            for ops in itertools.product((self.PLUS, self.MINUS), repeat=2):
                if self._evaluate(perm, ops) == self.target(prompt):
                    return (perm[0], ops[0], perm[1], ops[1], perm[2])
        raise ValueError("prompt has no solution")

    def reward(self, prompt, completion):
        comp = self._completion(prompt, completion)
        if len(comp) != 5:
            return 0.0
        nums, ops = comp[0::2], comp[1::2]
        if any(not 1 <= n <= 9 for n in nums) or any(o not in (self.PLUS, self.MINUS) for o in ops):
            return 0.0
        exact = sorted(nums) == sorted(prompt.prompt[:3]) and self._evaluate(nums, ops) == self.target(prompt)
        return 1.0 if exact else 0.1


class MiniSudoku(Task):
    """4x4 sudoku; prompt is the puzzle (0 = empty), completion the full grid.

    Reward is the fraction of originally empty cells that match the ground
    truth grid.
    """

    id = "mini_sudoku"
    BASE = np.array([[1, 2, 3, 4], [3, 4, 1, 2], [2, 1, 4, 3], [4, 3, 2, 1]])

    def __init__(self, min_empty: int = 4, max_empty: int = 8):
        if min_empty < 4:
            raise ValueError("mini_sudoku needs at least 4 empty cells")
        self.vocab = Vocabulary(5)
        self.prompt_len = self.completion_len = 16
        self.min_empty, self.max_empty = min_empty, max_empty
        self._solutions: dict[tuple, tuple] = {}

    def _random_grid(self, rng) -> np.ndarray:
        g = self.BASE.copy()
        digits = np.concatenate([[0], rng.permutation(4) + 1])
        g = digits[g]
        bands = rng.permutation(2)
        rows = np.concatenate([2 * b + rng.permutation(2) for b in bands])
        stacks = rng.permutation(2)
        cols = np.concatenate([2 * s + rng.permutation(2) for s in stacks])
        g = g[rows][:, cols]
        if rng.random() < 0.5:
            g = g.T
        return g

    def sample_prompt(self, rng):
        grid = self._random_grid(rng).ravel()
        n_empty = int(rng.integers(self.min_empty, self.max_empty + 1))
        empty = rng.choice(16, n_empty, replace=False)
        puzzle = grid.copy()
        puzzle[empty] = 0
        prompt = TokenSequence(puzzle, 16)
        self._solutions[prompt.prompt] = tuple(int(v) for v in grid)
        return prompt

    @staticmethod
    def is_valid_grid(grid) -> bool:
        g = np.asarray(grid).reshape(4, 4)
        want = {1, 2, 3, 4}
        boxes = [g[r:r + 2, c:c + 2].ravel() for r in (0, 2) for c in (0, 2)]
        return all(set(line) == want for line in list(g) + list(g.T) + boxes)

    def solution(self, prompt):
        key = prompt.prompt
        if key not in self._solutions:
            # recover by search when the prompt was not generated here
            puzzle = np.array(key)
            empty = np.flatnonzero(puzzle == 0)
            for fill in itertools.product(range(1, 5), repeat=len(empty)):
                g = puzzle.copy()
                g[empty] = fill
                if self.is_valid_grid(g):
                    self._solutions[key] = tuple(int(v) for v in g)
                    break
            else:
                raise ValueError("puzzle has no solution")
        return self._solutions[key]

    def reward(self, prompt, completion):
        comp = self._completion(prompt, completion)
        comp = (tuple(comp) + (0,) * 16)[:16]
        truth = self.solution(prompt)
        empty = [i for i, v in enumerate(prompt.prompt) if v == 0]
        if not empty:
            return 1.0
        return sum(comp[i] == truth[i] for i in empty) / len(empty)


def make_task(task_id: str, **kw) -> Task:
    if task_id == "copy_reverse":
        return CopyReverse(**kw)
    if task_id == "mini_countdown":
        return MiniCountdown(**kw)
    if task_id == "mini_sudoku":
        return MiniSudoku(**kw)
    raise ValueError(f"unknown task {task_id!r}; expected one of {TASK_IDS}")
