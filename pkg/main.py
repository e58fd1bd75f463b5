# ReviewHarness/main.py
import sys
from typing import Optional

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from routers.batch_router import BatchRegistry, router as batch_router, set_registry


def create_app(registry: Optional[BatchRegistry] = None) -> FastAPI:
    app = FastAPI(title="Review Harness")

    # --- CORS 설정 (대시보드 개발 서버와 연동) ---
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["http://localhost:5173"],
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    if registry is not None:
        set_registry(registry)

    # --- API 라우터 등록 ---
    app.include_router(batch_router)

    @app.get("/health")
    async def health():
        return {"status": "ok"}

    return app


app = create_app()


if __name__ == "__main__":
    from cli import main

    sys.exit(main())
