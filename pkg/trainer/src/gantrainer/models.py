"""Generator/discriminator architectures and the training configuration."""

from __future__ import annotations

from dataclasses import dataclass

from torch import nn


@dataclass
class GanTrainConfig:
    """Training knobs. Defaults follow the published full-scale recipe;
    desk-scale runs shrink base_channels/epochs/batch_size instead of the
    architecture shape."""

    epochs: int = 2300
    batch_size: int = 128
    lr: float = 2e-4
    decay_start_epoch: int = 100
    n_res_blocks: int = 6
    first_conv_kernel: int = 3
    base_channels: int = 64
    # generator loss weights; activ_coeff defaults to twice cycle_coeff
    cycle_coeff: float = 100.0
    gan_exp_weight: float = 2.0 / 3.0
    gan_sim_weight: float = 1.0 / 3.0
    cyc_sim_weight: float = 2.0 / 3.0
    cyc_exp_weight: float = 1.0 / 3.0
    activ_coeff: float | None = None
    # identity term from the unmodified original recipe, off by default
    use_identity: bool = False
    identity_weight: float = 5.0

    def __post_init__(self):
        if self.activ_coeff is None:
            self.activ_coeff = 2.0 * self.cycle_coeff
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0.0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.decay_start_epoch <= self.epochs:
            raise ValueError("need 0 <= decay_start_epoch <= epochs")
        if self.n_res_blocks < 1:
            raise ValueError("n_res_blocks must be >= 1")
        if self.first_conv_kernel < 1 or self.first_conv_kernel % 2 == 0:
            raise ValueError("first_conv_kernel must be odd and >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        for name in ("cycle_coeff", "gan_exp_weight", "gan_sim_weight",
                     "cyc_sim_weight", "cyc_exp_weight", "activ_coeff",
                     "identity_weight"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")

    def lr_factor(self, epoch: int) -> float:
        """Linear decay to zero after decay_start_epoch (1-based epochs)."""
        if epoch <= self.decay_start_epoch:
            return 1.0
        span = self.epochs - self.decay_start_epoch
        if span == 0:
            return 0.0
        return max(0.0, 1.0 - (epoch - self.decay_start_epoch) / span)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "epochs", "batch_size", "lr", "decay_start_epoch",
            "n_res_blocks", "first_conv_kernel", "base_channels",
            "cycle_coeff", "gan_exp_weight", "gan_sim_weight",
            "cyc_sim_weight", "cyc_exp_weight", "activ_coeff",
            "use_identity", "identity_weight")}


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Encoder, residual trunk, decoder. Single-channel 64x64 in and out;
    the output sigmoid keeps pixels in [0, 1] to match the dataset range."""

    def __init__(self, cfg: GanTrainConfig):
        super().__init__()
        k = cfg.first_conv_kernel
        c = cfg.base_channels
        layers: list[nn.Module] = [
            nn.Conv2d(1, c, k, padding=k // 2),
            nn.InstanceNorm2d(c),
            nn.ReLU(inplace=True),
        ]
        for mult in (1, 2):
            layers += [
                nn.Conv2d(c * mult, c * mult * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(c * mult * 2),
                nn.ReLU(inplace=True),
            ]
        layers += [ResidualBlock(c * 4) for _ in range(cfg.n_res_blocks)]
        for mult in (4, 2):
            layers += [
                nn.ConvTranspose2d(c * mult, c * mult // 2, 3, stride=2,
                                   padding=1, output_padding=1),
                nn.InstanceNorm2d(c * mult // 2),
                nn.ReLU(inplace=True),
            ]
        layers += [nn.Conv2d(c, 1, k, padding=k // 2), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Discriminator(nn.Module):
    """Patch classifier: strided 4x4 convolutions ending in a logit map."""

    def __init__(self, cfg: GanTrainConfig):
        super().__init__()
        c = cfg.base_channels
        self.net = nn.Sequential(
            nn.Conv2d(1, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c, c * 2, 4, stride=2, padding=1),
            nn.InstanceNorm2d(c * 2),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c * 2, c * 4, 4, stride=2, padding=1),
            nn.InstanceNorm2d(c * 4),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c * 4, c * 8, 4, stride=1, padding=1),
            nn.InstanceNorm2d(c * 8),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c * 8, 1, 4, stride=1, padding=1),
        )

    def forward(self, x):
        return self.net(x)


def build_models(cfg: GanTrainConfig) -> tuple[Generator, Generator,
                                               Discriminator, Discriminator]:
    """(G_exp, G_sim, D_exp, D_sim): G_exp maps simulated images toward the
    experimental domain, G_sim the reverse; each D judges its own domain."""
    return (Generator(cfg), Generator(cfg),
            Discriminator(cfg), Discriminator(cfg))


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
