from pydantic import BaseModel, ConfigDict, Field


class LatentConfig(BaseModel):
    """Dimensions of the content, motion, noise and action codes"""

    model_config = ConfigDict(frozen=True)

    d_c: int = Field(50, ge=1)
    d_m: int = Field(10, ge=1)
    d_e: int = Field(10, ge=1)
    d_a: int = Field(0, ge=0)  # 0 = unconditional

    @property
    def d(self) -> int:
        return self.d_c + self.d_m

    @property
    def rnn_input_dim(self) -> int:
        return self.d_a + self.d_e
