from typing import Literal

from pydantic import BaseModel, ConfigDict, Field


class ArchConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    image_size: Literal[32, 64, 96] = 64
    base_channels: int = Field(64, ge=1)
    latent_dim: int = Field(60, ge=2)  # d = d_c + d_m
    T: int = Field(16, ge=2)
    d_a: int = Field(0, ge=0)  # 0 = no Q head
    dv_mode: Literal["downsample", "table_literal"] = "downsample"
    action_target: Literal["rnn", "generator"] = "rnn"

    @property
    def generator_input_dim(self) -> int:
        if self.action_target == "generator":
            return self.latent_dim + self.d_a
        return self.latent_dim

    @property
    def first_kernel(self) -> int:
        # 96 = 6 * 2**4, the others start from a 4x4 map
        return 6 if self.image_size == 96 else 4
