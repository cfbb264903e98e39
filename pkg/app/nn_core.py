# app/nn_core.py
"""Dense float64 networks for the actor and critic, Adam stepping with a
finite-gradient guard, and safetensors checkpoints."""
import copy
import hashlib
from pathlib import Path

import torch
from safetensors.torch import load_file, save_file
from torch import nn

from errors import CheckpointMismatchError, NonFiniteError, ShapeError, TapeError

DTYPE = torch.float64


class Mlp(nn.Module):
    """tanh hidden layers, linear head. Orthogonal weights, zero biases."""

    def __init__(self, sizes: list[int], output_gain: float = 1.0,
                 generator: torch.Generator | None = None):
        super().__init__()
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ShapeError(f"layer sizes must be >= 1 and at least two, got {sizes}")
        self.sizes = list(sizes)
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(sizes[:-1], sizes[1:])
        )
        hidden_gain = nn.init.calculate_gain("tanh")
        for n, layer in enumerate(self.layers):
            gain = output_gain if n == len(self.layers) - 1 else hidden_gain
            nn.init.orthogonal_(layer.weight, gain=gain, generator=generator)
            nn.init.zeros_(layer.bias)

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"expected input width {self.in_dim}, got {tuple(x.shape)}")
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
        return self.layers[-1](x)


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def forward(mlp: Mlp, x) -> torch.Tensor:
    return mlp(as_tensor(x))


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(params) into .grad; call zero_grad between steps."""
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise TapeError("loss has no recorded graph; was it computed under torch.no_grad()?")
    loss.backward()


# ---------- Optimizer ----------

def make_optimizer(module: nn.Module, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam(module.parameters(), lr=lr, betas=tuple(betas), eps=eps)


def optimizer_step(optimizer: torch.optim.Optimizer, max_grad_norm: float | None = None) -> None:
    params = [p for g in optimizer.param_groups for p in g["params"] if p.grad is not None]
    for p in params:
        if not torch.isfinite(p.grad).all():
            raise NonFiniteError("non-finite gradient; refusing optimizer step")
    if max_grad_norm is not None and params:
        nn.utils.clip_grad_norm_(params, max_grad_norm)
    optimizer.step()


# ---------- Parameters ----------

def clone(module: nn.Module) -> nn.Module:
    return copy.deepcopy(module)


def param_digest(*modules: nn.Module) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, t in m.state_dict().items():
            h.update(name.encode("utf-8"))
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_params(path, modules: dict[str, nn.Module], metadata: dict[str, str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {
        f"{prefix}.{name}": t.detach().contiguous()
        for prefix, m in modules.items()
        for name, t in m.state_dict().items()
    }
    save_file(tensors, str(path), metadata={k: str(v) for k, v in (metadata or {}).items()})
    return path


def load_params(path) -> dict[str, torch.Tensor]:
    return load_file(str(path))


def load_into(module: nn.Module, tensors: dict[str, torch.Tensor], prefix: str) -> None:
    own = module.state_dict()
    picked = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    missing = sorted(set(own) - set(picked))
    if missing:
        raise CheckpointMismatchError(f"checkpoint lacks {prefix}: {missing}")
    for name, t in own.items():
        if tuple(picked[name].shape) != tuple(t.shape):
            raise CheckpointMismatchError(
                f"{prefix}.{name}: checkpoint shape {tuple(picked[name].shape)} != model {tuple(t.shape)}"
            )
    module.load_state_dict({k: picked[k] for k in own})
