from fastapi import FastAPI
from app.api.v1 import experiments
from app.core.logging import setup_logging
import logging

# 设置日志配置
setup_logging()
logger = logging.getLogger(__name__)

app = FastAPI(title="MPCPA Simulator")


@app.on_event("startup")
async def startup_event():
    """应用启动时的初始化"""
    logger.info("Starting MPCPA simulator API...")


app.include_router(experiments.router, prefix="/api/v1", tags=["experiments"])
