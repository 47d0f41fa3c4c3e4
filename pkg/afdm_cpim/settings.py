from dotenv import load_dotenv
from pydantic import model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="AFDM_CPIM_")

    OUTPUT_DIR: str = "runs"
    JOBS: int = 1
    LOG_LEVEL: str = "INFO"

    # Refusal thresholds shared by the library and the CLI
    ML_CANDIDATE_BUDGET: int = 2**24
    SUBSET_BUDGET: int = 10**7
    EMULATION_MAX_VARS: int = 26

    @model_validator(mode="before")
    @classmethod
    def ensure_no_empty_vars(cls, values: dict):
        for field_name, field_value in values.items():
            if isinstance(field_value, str) and not field_value.strip():
                raise ValueError(f"env var 'AFDM_CPIM_{field_name}' cannot be empty.")
        return values


# Loaded only the first time the module is imported
load_dotenv()
settings = Settings()
