from typing import List, Optional

from fastapi import APIRouter, HTTPException, Query

from scripts.errors import ConfigError, DomainError
from scripts.flops import flops_table
from scripts.run_config import TrainConfig, load_train_config
from scripts.utils import get_config_path

router = APIRouter()


@router.get("/table", summary="各方法训练/测试 FLOPs 比值表")
def get_flops_table(
    preset: Optional[str] = Query(None, description="config/presets 下的配置名（不含 .json）"),
    methods: List[str] = Query(['dense', 'static', 'stu', 'pf_uniform', 'small_dense', 'ticket']),
    s_G: List[float] = Query([0.8, 0.9, 0.95]),
    s_D: List[float] = Query([0.5]),
):
    try:
        config = load_train_config(get_config_path(f"presets/{preset}.json")) if preset else TrainConfig()
        rows = flops_table(config, methods, s_G, s_D)
    except FileNotFoundError:
        raise HTTPException(status_code=404, detail=f"预设配置不存在: {preset}")
    except (ConfigError, DomainError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    return {
        "status": "success",
        "message": f"共 {len(rows)} 行",
        "data": rows
    }
