from contextlib import asynccontextmanager
from datetime import datetime

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from loguru import logger

from routers import flops, report, sweep, train
from scripts.errors import ConfigError
from scripts.system_resource_check import check_system_resources
from scripts.utils import load_config, setup_logging

# 配置日志系统
log_info = setup_logging()


@asynccontextmanager
async def lifespan(app: FastAPI):
    """应用生命周期管理"""
    logger.info("正在启动应用...")
    try:
        current_config = load_config()
        logger.info(f"输出目录配置: {current_config.get('output', {})}")
    except ConfigError as e:
        logger.warning(f"警告: {e}，使用默认配置")

    resources = check_system_resources()
    logger.info(f"已检测系统资源，推荐扫描并行数: {resources['summary']['recommended_jobs']}")
    logger.success("=== 应用启动完成 ===")
    logger.info(f"启动时间: {datetime.now().isoformat()}")

    yield

    logger.info("=== 应用关闭阶段 ===")
    logger.success("=== 应用关闭完成 ===")


# 创建 FastAPI 应用实例
app = FastAPI(
    title="Sparse Evolve",
    description="稀疏 GAN 训练、基线对比与 FLOPs 统计的 API",
    version="0.1.0",
    lifespan=lifespan
)


@app.get("/health")
async def health_check():
    """健康检查端点"""
    resources = check_system_resources()
    return {
        "status": "running",
        "timestamp": datetime.now().isoformat(),
        "recommended_jobs": resources["summary"]["recommended_jobs"]
    }


# 添加 CORS 中间件
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# 注册路由
app.include_router(train.router, prefix="/train", tags=["训练"])
app.include_router(sweep.router, prefix="/sweep", tags=["网格扫描"])
app.include_router(report.router, prefix="/report", tags=["报告生成"])
app.include_router(flops.router, prefix="/flops", tags=["FLOPs 统计"])

# 入口点，启动应用
if __name__ == "__main__":
    import uvicorn

    try:
        server_config = load_config().get('server', {})
    except ConfigError:
        server_config = {}
    host = server_config.get('host', '127.0.0.1')
    port = server_config.get('port', 8899)

    logger.info(f"=== 服务启动: http://{host}:{port} ===")
    uvicorn.run(
        "main:app",
        host=host,
        port=port,
        log_config=None,
        reload=False
    )
