from fastapi import APIRouter, HTTPException, BackgroundTasks
from pydantic import BaseModel, Field, model_validator
from typing import Dict, Any, List, Optional
from datetime import datetime
import logging
import uuid

from app.core.config import list_experiment_configs, load_experiment_config, validate_experiment_config
from app.core.errors import MpcpaError
from app.models.experiments import ExperimentConfig
from app.services.experiment_runner import ARM_USAGE, cmd_run, parse_arm

router = APIRouter()
logger = logging.getLogger(__name__)


class ExperimentRequest(BaseModel):
    """实验请求模型：config（内联映射）与 config_path 二选一"""
    arm: str = "mpcpa"
    config: Optional[Dict[str, Any]] = None
    config_path: Optional[str] = None
    output_dir: Optional[str] = None
    parallelism: int = Field(1, ge=1)
    async_: bool = False

    @model_validator(mode="after")
    def validate_source(self):
        if (self.config is None) == (self.config_path is None):
            raise ValueError("exactly one of config and config_path is required")
        return self


class ExperimentResponse(BaseModel):
    """实验响应模型"""
    task_id: Optional[str] = None
    status: str
    report: Optional[Dict[str, Any]] = None
    run_dir: Optional[str] = None
    message: Optional[str] = None


# 存储后台任务的结果
experiment_tasks: Dict[str, Dict[str, Any]] = {}


def _resolve_config(request: ExperimentRequest) -> ExperimentConfig:
    if request.config is not None:
        return validate_experiment_config(request.config)
    return load_experiment_config(request.config_path)


async def execute_experiment_task(task_id: str, config: ExperimentConfig, request: ExperimentRequest):
    """在后台执行实验"""
    try:
        result = await cmd_run(config, request.arm, request.output_dir, request.parallelism)
        experiment_tasks[task_id] = {
            "status": "completed",
            "report": result.report.model_dump(mode="json"),
            "run_dir": str(result.run_dir) if result.run_dir else None,
            "timestamp": datetime.now().isoformat(),
        }
    except Exception as e:
        logger.error(f"Error executing experiment task {task_id}: {str(e)}")
        experiment_tasks[task_id] = {
            "status": "failed",
            "error": f"{type(e).__name__}: {e}",
            "timestamp": datetime.now().isoformat(),
        }


@router.post("/experiments/run", response_model=ExperimentResponse)
async def run_experiment(request: ExperimentRequest, background_tasks: BackgroundTasks) -> ExperimentResponse:
    """
    运行一个实验臂

    同步执行（默认）直接返回报告；async_=True 时返回 task_id，
    之后通过 /experiments/tasks/{task_id} 查询。
    """
    try:
        parse_arm(request.arm)
        config = _resolve_config(request)
    except MpcpaError as e:
        raise HTTPException(status_code=400, detail=f"{type(e).__name__}: {e}")

    if request.async_:
        task_id = f"{config.name}_{uuid.uuid4().hex[:12]}"
        experiment_tasks[task_id] = {"status": "pending"}
        background_tasks.add_task(execute_experiment_task, task_id, config, request)
        return ExperimentResponse(task_id=task_id, status="pending", message="Task started")

    try:
        result = await cmd_run(config, request.arm, request.output_dir, request.parallelism)
    except MpcpaError as e:
        logger.error(f"Error executing experiment: {str(e)}")
        raise HTTPException(status_code=400, detail=f"{type(e).__name__}: {e}")
    return ExperimentResponse(
        status="completed",
        report=result.report.model_dump(mode="json"),
        run_dir=str(result.run_dir) if result.run_dir else None,
    )


@router.get("/experiments/tasks/{task_id}", response_model=ExperimentResponse)
async def get_task_status(task_id: str) -> ExperimentResponse:
    """获取后台实验的状态和结果"""
    task = experiment_tasks.get(task_id)
    if not task:
        raise HTTPException(status_code=404, detail="Task not found")
    if task["status"] == "completed":
        return ExperimentResponse(task_id=task_id, status="completed", report=task["report"], run_dir=task["run_dir"])
    if task["status"] == "failed":
        return ExperimentResponse(task_id=task_id, status="failed", message=task["error"])
    return ExperimentResponse(task_id=task_id, status="pending", message="Task is still running")


@router.get("/experiments/arms")
async def list_arms() -> Dict[str, List[str]]:
    """可用的实验臂与随包提供的实验配置"""
    return {"arms": list(ARM_USAGE.values()), "configs": list_experiment_configs()}
