from typing import Literal

from pydantic import BaseModel, Field


class TrainConfig(BaseModel):
    batch_size: int = Field(32, ge=1)
    iterations: int = Field(10000, ge=0)
    T: int = Field(16, ge=2)
    gen_loss_mode: Literal["saturating", "non_saturating"] = "non_saturating"
    lambda_info: float = Field(1.0, ge=0)
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = Field(100, ge=1)
    checkpoint_every: int = Field(1000, ge=0)  # 0 = only the final checkpoint
    seed: int = 0
    use_image_discriminator: bool = True
    supervised_q: bool = False
    num_workers: int = Field(0, ge=0)


class LossReport(BaseModel):
    iteration: int
    d_image_loss: float
    d_video_loss: float
    g_loss: float
    info_loss: float
