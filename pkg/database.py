from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from config import get_settings

# SQLite ledger of metric reports
SQLALCHEMY_DATABASE_URL = get_settings().runs_db_url

engine = create_engine(
    SQLALCHEMY_DATABASE_URL, connect_args={"check_same_thread": False}
)

SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

Base = declarative_base()


def create_tables():
    # models_eval registers its rows on Base
    import models_eval  # noqa: F401

    Base.metadata.create_all(bind=engine)
