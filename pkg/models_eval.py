import math
from datetime import datetime, timezone
from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator
from sqlalchemy import Column, DateTime, Float, Integer, String, Text

from database import Base

EmbedderKind = Literal["average_color", "classifier_feature"]


class MetricReport(BaseModel):
    metric: Literal["acd", "mcs", "is", "classifier_accuracy", "cross_clip_distance"]
    value: float
    n: int = Field(ge=0)
    embedder: str
    config_hash: str
    std: Optional[float] = None
    notes: Optional[str] = None

    @model_validator(mode="after")
    def check_range(self):
        if not math.isfinite(self.value):
            raise ValueError(f"{self.metric} value is not finite")
        if self.metric in ("acd", "cross_clip_distance") and self.value < 0:
            raise ValueError(f"{self.metric} must be non-negative")
        if self.metric in ("mcs", "classifier_accuracy") and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"{self.metric} must lie in [0, 1]")
        if self.metric == "is" and self.value < 1.0 - 1e-9:
            raise ValueError("inception score is below 1")
        return self


class ClassifierConfig(BaseModel):
    T: int = Field(16, ge=5)
    base_channels: int = Field(32, ge=1)
    iterations: int = Field(500, ge=0)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(0.0002, gt=0)
    beta1: float = 0.5
    beta2: float = 0.999
    holdout: float = Field(0.2, gt=0, lt=1)
    seed: int = 0


class MetricRecord(Base):
    __tablename__ = "metric_reports"

    id = Column(Integer, primary_key=True, index=True)
    metric = Column(String, index=True)
    value = Column(Float)
    n = Column(Integer)
    embedder = Column(String)
    config_hash = Column(String, index=True)  # md5 of metric inputs, the cache key
    report_json = Column(Text)
    created_at = Column(DateTime, default=lambda: datetime.now(timezone.utc))
