import logging
import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

from errors import ConfigError

logger = logging.getLogger(__name__)

PROMPT_VARIANTS = ('independent', 'ordinal')
ROUNDING_MODES = ('half_down', 'half_up')


def _round(x, rounding):
    if rounding == 'half_up':
        return int(math.floor(x + 0.5))
    return int(math.ceil(x - 0.5))


def default_reference_indices(P, n, rounding='half_down'):
    """
    n evenly spaced phase ids from 1 to P.
    Collisions after rounding are replaced by the nearest unused id.
    """
    if rounding not in ROUNDING_MODES:
        raise ConfigError(f'rounding must be one of {ROUNDING_MODES}, got {rounding!r}')
    if n < 2:
        raise ConfigError(f'Ordinal prompts need at least 2 references, got n={n}')
    if n > P:
        raise ConfigError(f'Reference count n={n} exceeds phase count P={P}')

    positions = [1 + k * (P - 1) / (n - 1) for k in range(n)]
    chosen = []
    for x in positions:
        candidate = min(max(_round(x, rounding), 1), P)
        if candidate in chosen:
            unused = [p for p in range(1, P + 1) if p not in chosen]
            candidate = min(unused, key=lambda p: (abs(p - x), p))
        chosen.append(candidate)
    return sorted(chosen)


def interpolation_plan(reference_indices, P):
    """
    For every phase 1..P: positions (into the reference list) of the two
    bracketing references and the interpolation weight of the upper one.
    A phase that is itself a reference uses that reference twice with weight 0.
    """
    refs = list(reference_indices)
    lower = np.zeros(P, dtype=np.int64)
    upper = np.zeros(P, dtype=np.int64)
    lam = np.zeros(P, dtype=np.float64)
    for p in range(1, P + 1):
        if p in refs:
            lower[p - 1] = upper[p - 1] = refs.index(p)
            continue
        i = max(k for k, r in enumerate(refs) if r < p)
        lower[p - 1], upper[p - 1] = i, i + 1
        lam[p - 1] = (p - refs[i]) / (refs[i + 1] - refs[i])
    return lower, upper, lam


def interpolate_first_token(references, reference_indices, p):
    """(1 - lam) * E_lower + lam * E_upper for phase p"""
    P = reference_indices[-1]
    if not 1 <= p <= P:
        raise ConfigError(f'Phase id {p} outside 1..{P}')
    lower, upper, lam = interpolation_plan(reference_indices, P)
    weight = torch.as_tensor(lam[p - 1], dtype=references.dtype, device=references.device)
    return (1 - weight) * references[lower[p - 1]] + weight * references[upper[p - 1]]


@dataclass(frozen=True)
class PromptBankConfig:
    P: int
    m: int = 4
    token_dim: int = 32
    variant: str = 'ordinal'
    n: int = 3
    reference_indices: tuple = None
    shared_context: bool = True
    rounding: str = 'half_down'
    init_std: float = 0.02

    def __post_init__(self):
        if self.P < 1:
            raise ConfigError(f'P must be positive, got {self.P}')
        if self.m < 0:
            raise ConfigError(f'Context token count m must be >= 0, got {self.m}')
        if self.token_dim < 1:
            raise ConfigError(f'token_dim must be positive, got {self.token_dim}')
        if self.variant not in PROMPT_VARIANTS:
            raise ConfigError(f'Prompt variant must be one of {PROMPT_VARIANTS}, '
                              f'got {self.variant!r}')
        if self.variant == 'independent':
            object.__setattr__(self, 'reference_indices', ())
            return

        refs = self.reference_indices
        if refs is None or len(refs) == 0:
            refs = default_reference_indices(self.P, self.n, self.rounding)
        refs = tuple(int(r) for r in refs)
        if list(refs) != sorted(set(refs)):
            raise ConfigError(f'reference_indices must be sorted and unique, got {refs}')
        if refs[0] != 1 or refs[-1] != self.P:
            raise ConfigError(f'reference_indices must start at 1 and end at P={self.P}, '
                              f'got {refs}')
        object.__setattr__(self, 'reference_indices', refs)
        object.__setattr__(self, 'n', len(refs))

    def to_json(self):
        data = asdict(self)
        data['reference_indices'] = list(self.reference_indices)
        return data


class PromptBank(nn.Module):
    """
    Learnable prompts: one phase-specific first token followed by m context tokens.
    'independent' learns all P first tokens; 'ordinal' learns n reference tokens
    and interpolates the rest piecewise-linearly over the phase index.
    """

    def __init__(self, config, init_first_tokens=None, generator=None):
        super().__init__()
        self.config = config
        P, m, D = config.P, config.m, config.token_dim

        context_shape = (m, D) if config.shared_context else (P, m, D)
        self.context_tokens = nn.Parameter(
            torch.randn(context_shape, generator=generator) * config.init_std)

        if init_first_tokens is None:
            first = torch.randn(P, D, generator=generator) * config.init_std
        else:
            first = torch.as_tensor(init_first_tokens, dtype=torch.float32).detach().clone()
            if first.shape != (P, D):
                raise ConfigError(f'init_first_tokens must be {P}x{D}, got {tuple(first.shape)}')

        if config.variant == 'independent':
            self.first_tokens = nn.Parameter(first)
        else:
            refs = torch.as_tensor(config.reference_indices, dtype=torch.long) - 1
            self.reference_tokens = nn.Parameter(first[refs].clone())
            lower, upper, lam = interpolation_plan(config.reference_indices, P)
            self.register_buffer('plan_lower', torch.as_tensor(lower))
            self.register_buffer('plan_upper', torch.as_tensor(upper))
            self.register_buffer('plan_lambda', torch.as_tensor(lam, dtype=torch.float64))

    @property
    def P(self):
        return self.config.P

    def first_token_matrix(self):
        """P x token_dim first tokens, differentiable w.r.t. the bank's parameters"""
        if self.config.variant == 'independent':
            return self.first_tokens
        lam = self.plan_lambda.to(self.reference_tokens.dtype).unsqueeze(1)
        return (1 - lam) * self.reference_tokens[self.plan_lower] \
            + lam * self.reference_tokens[self.plan_upper]

    def _context_for(self, phase_index):
        if self.config.shared_context:
            return self.context_tokens
        return self.context_tokens[phase_index]

    def materialize(self, p):
        """(1 + m) x token_dim prompt of phase p (1-based)"""
        if not 1 <= p <= self.P:
            raise ConfigError(f'Phase id {p} outside 1..{self.P}')
        first = self.first_token_matrix()[p - 1:p]
        return torch.cat([first, self._context_for(p - 1)], dim=0)

    def materialize_all(self):
        """P x (1 + m) x token_dim prompts for every phase"""
        first = self.first_token_matrix().unsqueeze(1)
        if self.config.shared_context:
            context = self.context_tokens.unsqueeze(0).expand(self.P, -1, -1)
        else:
            context = self.context_tokens
        return torch.cat([first, context], dim=1)

    def export_config(self):
        """Checkpoint entries describing the bank"""
        return {
            'prompt.variant': self.config.variant,
            'prompt.m': self.config.m,
            'prompt.n': self.config.n if self.config.variant == 'ordinal' else None,
            'prompt.reference_indices': list(self.config.reference_indices),
            'prompt.config': self.config.to_json(),
        }
