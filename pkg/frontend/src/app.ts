/** DOM bootstrap: three fused viewports with crosshair linking, draggable
 * control point markers, a metrics readout, and stage/undo buttons. All
 * state lives in ViewerModel; this file only renders it. */

import { ApiClient } from './api.js';
import { ALL_PLANES } from './planes.js';
import { Plane } from './types.js';
import { ViewerModel } from './viewmodel.js';

const VIEWPORT_PX = 384;

interface ViewportElements {
    plane: Plane;
    image: HTMLImageElement;
    overlay: HTMLCanvasElement;
    slider: HTMLInputElement;
    abort: AbortController | null;
}

function formatMm(x: number | undefined): string {
    return x === undefined ? '—' : `${x.toFixed(2)} mm`;
}

export function mountApp(root: HTMLElement, baseUrl: string): ViewerModel {
    const api = new ApiClient(baseUrl);
    const model = new ViewerModel(api);

    root.innerHTML = `
        <div class="toolbar">
            <button id="btn-rigid" disabled>Run rigid registration</button>
            <button id="btn-undo" disabled>Undo</button>
            <span id="metrics" class="metrics">no session</span>
        </div>
        <div class="viewports" id="viewports"></div>
    `;
    const viewportsHost = root.querySelector<HTMLDivElement>('#viewports')!;
    const rigidButton = root.querySelector<HTMLButtonElement>('#btn-rigid')!;
    const undoButton = root.querySelector<HTMLButtonElement>('#btn-undo')!;
    const metricsLabel = root.querySelector<HTMLSpanElement>('#metrics')!;

    const viewports: ViewportElements[] = ALL_PLANES.map((plane) => {
        const cell = document.createElement('div');
        cell.className = 'viewport';
        cell.innerHTML = `
            <h3>${plane}</h3>
            <div class="stack" style="position:relative;width:${VIEWPORT_PX}px;height:${VIEWPORT_PX}px">
                <img width="${VIEWPORT_PX}" height="${VIEWPORT_PX}" draggable="false" alt="${plane}">
                <canvas width="${VIEWPORT_PX}" height="${VIEWPORT_PX}"
                        style="position:absolute;left:0;top:0"></canvas>
            </div>
            <input type="range" min="-50" max="50" step="0.5" value="0">
        `;
        viewportsHost.appendChild(cell);
        return {
            plane,
            image: cell.querySelector('img')!,
            overlay: cell.querySelector('canvas')!,
            slider: cell.querySelector('input')!,
            abort: null,
        };
    });

    function mmPerPixel(plane: Plane): number {
        const info = model.sessionInfo;
        if (!info) {
            return 1;
        }
        // square viewport showing the full in-plane extent
        return Math.max(...info.size_mm) / VIEWPORT_PX;
    }

    function pixelToMm(vp: ViewportElements, px: number, py: number): [number, number] {
        const scale = mmPerPixel(vp.plane);
        return [(px - VIEWPORT_PX / 2) * scale, (py - VIEWPORT_PX / 2) * scale];
    }

    function mmToPixel(vp: ViewportElements, uMm: number, vMm: number): [number, number] {
        const scale = mmPerPixel(vp.plane);
        return [uMm / scale + VIEWPORT_PX / 2, vMm / scale + VIEWPORT_PX / 2];
    }

    async function refreshSlice(vp: ViewportElements): Promise<void> {
        const sid = model.sessionId;
        if (!sid || !model.rigidDone) {
            return;
        }
        vp.abort?.abort(); // cancel-on-stale
        vp.abort = new AbortController();
        try {
            const blob = await api.slicePng(sid, model.sliceRequest(vp.plane), vp.abort.signal);
            vp.image.src = URL.createObjectURL(blob);
        } catch (error) {
            if ((error as Error).name !== 'AbortError') {
                throw error;
            }
        }
    }

    function drawOverlay(vp: ViewportElements): void {
        const ctx = vp.overlay.getContext('2d');
        if (!ctx) {
            return;
        }
        ctx.clearRect(0, 0, VIEWPORT_PX, VIEWPORT_PX);
        const [cx, cy] = mmToPixel(vp, ...model.crosshairInPlane(vp.plane));
        ctx.strokeStyle = 'rgba(255,255,0,0.8)';
        ctx.beginPath();
        ctx.moveTo(cx, 0);
        ctx.lineTo(cx, VIEWPORT_PX);
        ctx.moveTo(0, cy);
        ctx.lineTo(VIEWPORT_PX, cy);
        ctx.stroke();
        for (const point of model.pointsOnPlane(vp.plane)) {
            const [px, py] = mmToPixel(vp, point.uv[0], point.uv[1]);
            ctx.fillStyle = point.role === 'anchor' ? 'rgba(120,120,255,0.9)' : 'rgba(255,80,80,0.9)';
            ctx.beginPath();
            ctx.arc(px, py, point.role === 'anchor' ? 4 : 6, 0, 2 * Math.PI);
            ctx.fill();
        }
    }

    function render(): void {
        rigidButton.disabled = !model.sessionId || model.rigidDone;
        undoButton.disabled = !model.canUndo;
        const metrics = model.metrics;
        if (metrics) {
            metricsLabel.textContent =
                `D_cl ${formatMm(metrics.dcl_current_mean)} (rigid ${formatMm(metrics.dcl_rigid_mean)})` +
                ` · LD ${formatMm(metrics.ld_mean)} · edits ${metrics.edits}`;
        } else if (model.sessionId) {
            metricsLabel.textContent = model.rigidDone ? '' : 'rigid registration pending';
        }
        if (model.lastError) {
            metricsLabel.textContent += ` · ${model.lastError.body.code}`;
        }
        for (const vp of viewports) {
            drawOverlay(vp);
        }
    }

    model.subscribe(render);

    rigidButton.addEventListener('click', () => {
        void model.runRigid().then(() => Promise.all(viewports.map(refreshSlice)));
    });
    undoButton.addEventListener('click', () => {
        void model.undo().then(() => Promise.all(viewports.map(refreshSlice)));
    });

    for (const vp of viewports) {
        vp.slider.addEventListener('input', () => {
            model.setPosition(vp.plane, Number(vp.slider.value));
            void refreshSlice(vp);
        });

        let dragPointId: number | null = null;
        let dragStart: [number, number] | null = null;

        vp.overlay.addEventListener('pointerdown', (event) => {
            const rect = vp.overlay.getBoundingClientRect();
            const px = event.clientX - rect.left;
            const py = event.clientY - rect.top;
            const mm = pixelToMm(vp, px, py);
            // grab the nearest movable marker within 10 px, otherwise move the crosshair
            let best: { id: number; d2: number } | null = null;
            for (const point of model.pointsOnPlane(vp.plane)) {
                if (point.role !== 'movable') {
                    continue;
                }
                const [qx, qy] = mmToPixel(vp, point.uv[0], point.uv[1]);
                const d2 = (qx - px) ** 2 + (qy - py) ** 2;
                if (d2 <= 100 && (!best || d2 < best.d2)) {
                    best = { id: point.id, d2 };
                }
            }
            if (best) {
                dragPointId = best.id;
                dragStart = mm;
                vp.overlay.setPointerCapture(event.pointerId);
            } else {
                model.setCrosshairFromViewport(vp.plane, mm[0], mm[1]);
                for (const other of viewports) {
                    if (other !== vp) {
                        void refreshSlice(other);
                    }
                }
            }
        });

        vp.overlay.addEventListener('pointerup', (event) => {
            if (dragPointId === null || dragStart === null) {
                return;
            }
            const rect = vp.overlay.getBoundingClientRect();
            const mm = pixelToMm(vp, event.clientX - rect.left, event.clientY - rect.top);
            const gesture = {
                pointId: dragPointId,
                plane: vp.plane,
                dragMm: [mm[0] - dragStart[0], mm[1] - dragStart[1]] as [number, number],
            };
            dragPointId = null;
            dragStart = null;
            void model.applyDrag(gesture).then((applied) => {
                if (applied) {
                    return Promise.all(viewports.map(refreshSlice));
                }
                return undefined;
            });
        });
    }

    return model;
}
