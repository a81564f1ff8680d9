/** View-model of the registration UI: session lifecycle, three linked
 * orthogonal viewports with a shared crosshair, control point drags lifted
 * from plane space to 3D, and the undo stack surfaced from the service.
 *
 * Deliberately DOM-free so it can be tested headlessly against a mocked
 * transport; app.ts owns the actual canvases and event wiring. */

import { ApiClient, SliceRequest } from './api.js';
import {
    ALL_PLANES,
    PLANE_BASES,
    inPlaneCoords,
    liftDragTo3d,
    planePosition,
    worldFromPlane,
} from './planes.js';
import {
    BlendMode,
    ControlPointJson,
    MetricsSummary,
    Plane,
    ServiceError,
    SessionInfo,
    Vec3,
} from './types.js';

export interface ViewportState {
    plane: Plane;
    /** offset along the plane normal from the volume center, mm */
    position: number;
    clipDepth: number;
    blend: BlendMode;
    zoom: number;
    pan: [number, number];
}

export interface EditGesture {
    pointId: number;
    /** in-plane drag, mm, in the viewport the gesture happened in */
    dragMm: [number, number];
    plane: Plane;
}

export type Listener = () => void;

function clamp(x: number, lo: number, hi: number): number {
    return Math.min(hi, Math.max(lo, x));
}

export class ViewerModel {
    private sid: string | null = null;
    private info: SessionInfo | null = null;
    private metricsState: MetricsSummary | null = null;
    private controlPointsState: ControlPointJson[] = [];
    private crosshairState: Vec3 = [0, 0, 0];
    private viewports = new Map<Plane, ViewportState>();
    private listeners: Listener[] = [];
    private pendingDrag = false;
    lastError: ServiceError | null = null;

    constructor(private readonly api: ApiClient) {
        for (const plane of ALL_PLANES) {
            this.viewports.set(plane, {
                plane,
                position: 0,
                clipDepth: 30,
                blend: 'alpha',
                zoom: 1,
                pan: [0, 0],
            });
        }
    }

    subscribe(listener: Listener): void {
        this.listeners.push(listener);
    }

    private emit(): void {
        for (const listener of this.listeners) {
            listener();
        }
    }

    get sessionId(): string | null {
        return this.sid;
    }

    get sessionInfo(): SessionInfo | null {
        return this.info;
    }

    get metrics(): MetricsSummary | null {
        return this.metricsState;
    }

    get controlPoints(): ControlPointJson[] {
        return this.controlPointsState;
    }

    get crosshair(): Vec3 {
        return this.crosshairState;
    }

    get rigidDone(): boolean {
        return this.info?.rigid_done ?? false;
    }

    get canUndo(): boolean {
        return (this.metricsState?.edits ?? 0) > 0;
    }

    viewport(plane: Plane): ViewportState {
        const state = this.viewports.get(plane);
        if (!state) {
            throw new Error(`no viewport for plane ${plane}`);
        }
        return state;
    }

    /** Half-extent of the volume along a plane's normal axis, mm. */
    private halfRange(plane: Plane): number {
        if (!this.info) {
            return 0;
        }
        return this.info.size_mm[PLANE_BASES[plane].normalAxis] / 2;
    }

    async openSession(config: unknown): Promise<void> {
        this.sid = await this.api.createSession(config);
        this.info = await this.api.info(this.sid);
        this.crosshairState = [...this.info.center] as Vec3;
        for (const plane of ALL_PLANES) {
            this.viewport(plane).position = 0;
        }
        this.emit();
    }

    private requireSession(): string {
        if (!this.sid) {
            throw new Error('no open session');
        }
        return this.sid;
    }

    async runRigid(): Promise<void> {
        const sid = this.requireSession();
        await this.api.registerRigid(sid);
        this.info = await this.api.info(sid);
        await this.refreshDerivedState();
    }

    private async refreshDerivedState(): Promise<void> {
        const sid = this.requireSession();
        const [metrics, cps] = await Promise.all([
            this.api.metrics(sid),
            this.api.controlPoints(sid),
        ]);
        this.metricsState = metrics;
        this.controlPointsState = cps.points;
        this.emit();
    }

    /** Move the shared crosshair from a click in one viewport. Updates the
     * other two viewports' positions so all three planes intersect at the
     * crosshair, clamped to the volume bounds. */
    setCrosshairFromViewport(plane: Plane, uMm: number, vMm: number): void {
        if (!this.info) {
            return;
        }
        const center = this.info.center;
        const world = worldFromPlane(plane, uMm, vMm, this.viewport(plane).position, center);
        for (const axis of [0, 1, 2] as const) {
            const half = this.info.size_mm[axis] / 2;
            world[axis] = clamp(world[axis], center[axis] - half, center[axis] + half);
        }
        this.crosshairState = world;
        for (const other of ALL_PLANES) {
            if (other !== plane) {
                this.viewport(other).position = planePosition(other, world, center);
            }
        }
        this.emit();
    }

    /** Crosshair position in a viewport's own (u, v) millimetres. */
    crosshairInPlane(plane: Plane): [number, number] {
        if (!this.info) {
            return [0, 0];
        }
        return inPlaneCoords(plane, this.crosshairState, this.info.center);
    }

    setPosition(plane: Plane, position: number): void {
        const half = this.halfRange(plane);
        this.viewport(plane).position = clamp(position, -half, half);
        this.emit();
    }

    setClipDepth(plane: Plane, clip: number): void {
        this.viewport(plane).clipDepth = Math.max(0, clip);
        this.emit();
    }

    setBlend(plane: Plane, blend: BlendMode): void {
        this.viewport(plane).blend = blend;
        this.emit();
    }

    sliceRequest(plane: Plane): SliceRequest {
        const state = this.viewport(plane);
        return { plane, pos: state.position, clip: state.clipDepth, blend: state.blend };
    }

    /** Control points whose position lies within `tolMm` of a plane, with
     * their in-plane coordinates; these are the draggable markers. */
    pointsOnPlane(plane: Plane, tolMm = 5): Array<ControlPointJson & { uv: [number, number] }> {
        if (!this.info) {
            return [];
        }
        const center = this.info.center;
        const pos = this.viewport(plane).position;
        return this.controlPointsState
            .filter(
                (p) => Math.abs(planePosition(plane, p.position, center) - pos) <= tolMm,
            )
            .map((p) => ({ ...p, uv: inPlaneCoords(plane, p.position, center) }));
    }

    /** Apply an in-plane drag gesture: lift to 3D, post, and adopt the
     * authoritative metrics from the response. Serialized: a second gesture
     * while one is in flight is dropped (single editing user). */
    async applyDrag(gesture: EditGesture): Promise<boolean> {
        const sid = this.requireSession();
        if (this.pendingDrag) {
            return false;
        }
        const point = this.controlPointsState.find((p) => p.id === gesture.pointId);
        if (!point || point.role !== 'movable') {
            return false;
        }
        this.pendingDrag = true;
        try {
            const displacement = liftDragTo3d(gesture.plane, gesture.dragMm[0], gesture.dragMm[1]);
            this.metricsState = await this.api.drag(sid, gesture.pointId, displacement);
            this.controlPointsState = (await this.api.controlPoints(sid)).points;
            this.lastError = null;
            this.emit();
            return true;
        } catch (error) {
            if (error instanceof ServiceError) {
                this.lastError = error;
                this.emit();
                return false;
            }
            throw error;
        } finally {
            this.pendingDrag = false;
        }
    }

    async undo(): Promise<boolean> {
        const sid = this.requireSession();
        try {
            this.metricsState = await this.api.undo(sid);
            this.controlPointsState = (await this.api.controlPoints(sid)).points;
            this.lastError = null;
            this.emit();
            return true;
        } catch (error) {
            if (error instanceof ServiceError) {
                this.lastError = error;
                this.emit();
                return false;
            }
            throw error;
        }
    }

    async refreshMetrics(): Promise<MetricsSummary> {
        const sid = this.requireSession();
        this.metricsState = await this.api.metrics(sid);
        this.emit();
        return this.metricsState;
    }
}
