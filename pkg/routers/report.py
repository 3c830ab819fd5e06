import os
from typing import Optional

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from scripts.errors import ContractError, MissingColumnsError
from scripts.report import generate_report

router = APIRouter()


class ReportRequest(BaseModel):
    results_csv: str
    output_dir: Optional[str] = None


@router.post("/generate", summary="由 results.csv 生成汇总表与 SVG 图")
def generate(request: ReportRequest):
    if not os.path.exists(request.results_csv):
        raise HTTPException(status_code=404, detail=f"结果文件不存在: {request.results_csv}")
    output_dir = request.output_dir or os.path.join(os.path.dirname(os.path.abspath(request.results_csv)), 'report')
    try:
        outputs = generate_report(request.results_csv, output_dir)
    except (MissingColumnsError, ContractError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    return {
        "status": "success",
        "message": f"已生成 {len(outputs)} 个文件",
        "data": outputs
    }
