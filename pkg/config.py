import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

class Config:
    # Project paths
    PROJECT_ROOT = Path(__file__).parent
    RESULTS_FOLDER = Path(os.getenv("RESULTS_FOLDER", str(PROJECT_ROOT / "results")))
    
    # Simulation defaults
    DEFAULT_SEED: int = int(os.getenv("ADAPNET_SEED", "0"))
    GEODE_LEVEL: int = int(os.getenv("ADAPNET_GEODE_LEVEL", "4"))
    MAX_GEODE_LEVEL: int = int(os.getenv("ADAPNET_MAX_GEODE_LEVEL", "7"))
    
    # Mesh maintenance
    PING_TIMEOUT: int = int(os.getenv("ADAPNET_PING_TIMEOUT", "3"))
    FLATTEN_MAX_PASSES: int = int(os.getenv("ADAPNET_FLATTEN_MAX_PASSES", "50"))
    
    # Replication (desk scale, maxScore defaults to 10 * r)
    REPULSIVE_RADIUS: int = int(os.getenv("ADAPNET_RADIUS", "8"))
    MAX_SCORE_FACTOR: float = float(os.getenv("ADAPNET_MAX_SCORE_FACTOR", "10"))
    EXPLORATION_SAMPLE: int = int(os.getenv("ADAPNET_EXPLORATION_SAMPLE", "4"))
    
    # Timing, in ticks (1 tick = 1 ping period)
    REPLICATION_PERIOD: int = int(os.getenv("ADAPNET_REPLICATION_PERIOD", "5"))
    REGULATION_PERIOD: int = int(os.getenv("ADAPNET_REGULATION_PERIOD", "10"))
    
    # Super layer
    QUOTA_DIVISOR: int = 10
    SUPER_DEGREE_TARGET: int = int(os.getenv("ADAPNET_SUPER_DEGREE", "4"))
    SUPER_WALK_TTL: int = int(os.getenv("ADAPNET_SUPER_WALK_TTL", "16"))
    MESH_WALK_TTL: int = int(os.getenv("ADAPNET_MESH_WALK_TTL", "256"))
    QUERY_TTL: int = int(os.getenv("ADAPNET_QUERY_TTL", "32"))
    ALLOCATED_CACHE_FACTOR: int = int(os.getenv("ADAPNET_ALLOCATED_CACHE_FACTOR", "2"))
    CAPABILITY_DISTRIBUTION: str = os.getenv(
        "ADAPNET_CAPABILITIES", "1:0.6,10:0.3,100:0.09,1000:0.01"
    )
    
    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    
    @classmethod
    def validate(cls):
        """Validate configuration and create output folders"""
        if cls.GEODE_LEVEL < 0 or cls.GEODE_LEVEL > cls.MAX_GEODE_LEVEL:
            raise ValueError(
                f"ADAPNET_GEODE_LEVEL must be within [0, {cls.MAX_GEODE_LEVEL}], got {cls.GEODE_LEVEL}"
            )
        if cls.REPULSIVE_RADIUS < 1:
            raise ValueError("ADAPNET_RADIUS must be at least 1")
        if cls.PING_TIMEOUT < 1:
            raise ValueError("ADAPNET_PING_TIMEOUT must be at least 1")
        
        # Create necessary directories
        cls.RESULTS_FOLDER.mkdir(parents=True, exist_ok=True)

