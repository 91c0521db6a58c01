"""
Tensor Core Module
Dense building blocks shared by the network, the trainer and the models:
- Two-layer MLPs with optional LayerNorm
- Backward pass and Adam updates with non-finite diagnostics
- Learning-rate schedule
- Finite-difference gradient checks (float64 shadow copies)
- Parameter checkpoint files (JSON header + little-endian f32 blocks)
"""

import copy
import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

logger = logging.getLogger(__name__)

HIDDEN_WIDTH = 128
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LR_START = 1e-3
LR_END = 1e-4
CHECKPOINT_FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Raised when a tensor width does not match what a block expects"""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its preconditions"""


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up in a loss, gradient or state"""


def set_deterministic(seed: int, threads: Optional[int] = None):
    """Seed torch and pin the reduction order"""
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    if threads:
        torch.set_num_threads(int(threads))


# ----------------------------------------------------------------------
# MLP blocks
# ----------------------------------------------------------------------

class Mlp(nn.Module):
    """Linear -> ReLU -> Linear, followed by LayerNorm unless disabled"""

    def __init__(self, in_width: int, out_width: int, hidden: int = HIDDEN_WIDTH, layer_norm: bool = True):
        super().__init__()
        self.in_width = int(in_width)
        self.out_width = int(out_width)
        self.hidden = nn.Linear(self.in_width, hidden)
        self.output = nn.Linear(hidden, self.out_width)
        self.norm = nn.LayerNorm(self.out_width) if layer_norm else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self, x)


def mlp_forward(params: Mlp, x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != params.in_width:
        raise ShapeError(f"MLP expects input width {params.in_width}, got {x.shape[-1]}")
    y = params.output(torch.relu(params.hidden(x)))
    return params.norm(y) if params.norm is not None else y


# ----------------------------------------------------------------------
# Gradients and optimizer
# ----------------------------------------------------------------------

def backward(loss: torch.Tensor, named_parameters: Iterable[Tuple[str, nn.Parameter]]) -> Dict[str, torch.Tensor]:
    """
    Gradients of a scalar loss with respect to every parameter

    The gradients are also stored on `.grad` (unused parameters get zeros)
    so a torch optimizer can consume them.
    """
    if loss.numel() != 1:
        raise ContractError(f"Loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss).all():
        raise NonFiniteError(f"Loss is not finite: {loss.item()}")
    named = [(name, p) for name, p in named_parameters if p.requires_grad]
    grads = torch.autograd.grad(loss.reshape(()), [p for _, p in named], allow_unused=True)
    out = OrderedDict()
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        p.grad = g.detach().clone()
        out[name] = g
    return out


def check_finite_gradients(named_parameters: Iterable[Tuple[str, nn.Parameter]]):
    for name, p in named_parameters:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteError(f"Non-finite gradient in parameter block '{name}'")


def make_optimizer(module: nn.Module, lr: float = LR_START) -> torch.optim.Adam:
    return torch.optim.Adam(module.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def adam_step(optimizer: torch.optim.Optimizer, module: nn.Module, lr: float):
    """One bias-corrected Adam update at the given learning rate"""
    check_finite_gradients(module.named_parameters())
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def lr_schedule(step: int, total_steps: int, start: float = LR_START, end: float = LR_END) -> float:
    """Exponential decay from `start` at step 0 to `end` at `total_steps`"""
    if total_steps < 0 or step < 0 or step > total_steps:
        raise ContractError(f"Schedule step {step} outside 0..{total_steps}")
    if total_steps == 0:
        return start
    return start * (end / start) ** (step / total_steps)


# ----------------------------------------------------------------------
# Gradient checks
# ----------------------------------------------------------------------

def shadow_f64(module: nn.Module) -> nn.Module:
    """Float64 copy of a module for tight gradient checks"""
    return copy.deepcopy(module).double()


def gradient_check(loss_fn: Callable[[], torch.Tensor], parameters: Sequence[torch.Tensor],
                   samples: int = 20, step: float = 1e-5, seed: int = 0,
                   floor: float = 1e-6) -> float:
    """
    Compare autograd gradients with central finite differences at random entries

    Args:
        loss_fn: closure returning a scalar loss from the current parameter values
        parameters: tensors to check (modified in place and restored)
        samples: number of random (tensor, entry) checks
        step: finite-difference step
        seed: entry selection seed
        floor: denominator floor for the relative error

    Returns:
        Largest relative error across the checked entries
    """
    parameters = [p for p in parameters if p.numel() > 0]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, parameters, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(parameters, grads)]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        k = int(rng.integers(len(parameters)))
        p = parameters[k]
        idx = int(rng.integers(p.numel()))
        flat = p.data.view(-1)
        original = flat[idx].item()
        with torch.no_grad():
            flat[idx] = original + step
            plus = loss_fn().item()
            flat[idx] = original - step
            minus = loss_fn().item()
            flat[idx] = original
        numeric = (plus - minus) / (2.0 * step)
        analytic = grads[k].view(-1)[idx].item()
        error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, error)
    return worst


# ----------------------------------------------------------------------
# Checkpoint files
# ----------------------------------------------------------------------

def optimizer_blocks(optimizer: torch.optim.Optimizer, module: nn.Module) -> Tuple[Dict[str, np.ndarray], int]:
    """Adam moments keyed by parameter name, plus the shared step count"""
    blocks: Dict[str, np.ndarray] = OrderedDict()
    step = 0
    for name, p in module.named_parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        blocks[f"adam/{name}/m"] = state["exp_avg"].detach().cpu().numpy()
        blocks[f"adam/{name}/v"] = state["exp_avg_sq"].detach().cpu().numpy()
        step = int(float(state["step"]))
    return blocks, step


def restore_optimizer(optimizer: torch.optim.Optimizer, module: nn.Module,
                      blocks: Dict[str, np.ndarray], step: int):
    for name, p in module.named_parameters():
        m, v = blocks.get(f"adam/{name}/m"), blocks.get(f"adam/{name}/v")
        if m is None or v is None:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.as_tensor(m, dtype=p.dtype).reshape(p.shape).clone(),
            "exp_avg_sq": torch.as_tensor(v, dtype=p.dtype).reshape(p.shape).clone(),
        }


def save_checkpoint(path: Union[str, Path], module: nn.Module, header: Optional[Dict] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None) -> Path:
    """
    Write parameters (and buffers) as a JSON header line followed by f32 blocks

    The header lists every block name and shape in file order; Adam moments
    follow the parameters when an optimizer is given.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks: Dict[str, np.ndarray] = OrderedDict(
        (name, tensor.detach().cpu().numpy()) for name, tensor in module.state_dict().items())
    header = dict(header or {})
    header["format_version"] = CHECKPOINT_FORMAT_VERSION
    if optimizer is not None:
        adam, step = optimizer_blocks(optimizer, module)
        blocks.update(adam)
        header["adam_step"] = step
    header["blocks"] = [{"name": name, "shape": list(array.shape)} for name, array in blocks.items()]

    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for array in blocks.values():
            f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    logger.debug("Wrote checkpoint %s (%d blocks)", path, len(blocks))
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict, Dict[str, np.ndarray]]:
    """Read a checkpoint file into (header, name -> float32 array)"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        payload = f.read()
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {header.get('format_version')}")

    blocks: Dict[str, np.ndarray] = OrderedDict()
    offset = 0
    for block in header["blocks"]:
        count = int(np.prod(block["shape"])) if block["shape"] else 1
        nbytes = 4 * count
        if offset + nbytes > len(payload):
            raise ContractError(f"{path}: truncated at block '{block['name']}'")
        blocks[block["name"]] = np.frombuffer(payload, dtype="<f4", count=count, offset=offset
                                              ).reshape(block["shape"]).astype(np.float32)
        offset += nbytes
    if offset != len(payload):
        raise ContractError(f"{path}: {len(payload) - offset} trailing bytes after the last block")
    return header, blocks


def restore_module(module: nn.Module, blocks: Dict[str, np.ndarray]):
    state = module.state_dict()
    missing = [name for name in state if name not in blocks]
    if missing:
        raise ContractError(f"Checkpoint is missing blocks: {', '.join(missing[:5])}")
    module.load_state_dict(OrderedDict(
        (name, torch.as_tensor(blocks[name], dtype=tensor.dtype).reshape(tensor.shape))
        for name, tensor in state.items()))
