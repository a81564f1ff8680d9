/** Thin typed client for the ablreg session service. All access to the
 * backend goes through this module; nothing else touches fetch. */

import {
    AuditEvent,
    BlendMode,
    ControlPointSetJson,
    MetricsSummary,
    Plane,
    RigidResult,
    ServiceError,
    ServiceErrorBody,
    SessionInfo,
    Vec3,
} from './types.js';

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface SliceRequest {
    plane: Plane;
    pos: number;
    clip: number;
    blend: BlendMode;
}

async function raiseForStatus(response: Response): Promise<Response> {
    if (response.ok) {
        return response;
    }
    let body: ServiceErrorBody;
    try {
        body = (await response.json()) as ServiceErrorBody;
    } catch {
        body = { code: 'unknown', message: response.statusText, stage: '' };
    }
    throw new ServiceError(response.status, body);
}

export class ApiClient {
    constructor(
        private readonly baseUrl: string,
        private readonly fetchFn: FetchLike = (url, init) => globalThis.fetch(url, init),
    ) {}

    private async getJson<T>(path: string): Promise<T> {
        const response = await raiseForStatus(await this.fetchFn(this.baseUrl + path));
        return (await response.json()) as T;
    }

    private async postJson<T>(path: string, body?: unknown): Promise<T> {
        const init: RequestInit = { method: 'POST' };
        if (body !== undefined) {
            init.headers = { 'content-type': 'application/json' };
            init.body = JSON.stringify(body);
        }
        const response = await raiseForStatus(await this.fetchFn(this.baseUrl + path, init));
        return (await response.json()) as T;
    }

    async createSession(config: unknown): Promise<string> {
        const out = await this.postJson<{ session_id: string }>('/sessions', config);
        return out.session_id;
    }

    info(sid: string): Promise<SessionInfo> {
        return this.getJson(`/sessions/${sid}/info`);
    }

    registerRigid(sid: string): Promise<RigidResult> {
        return this.postJson(`/sessions/${sid}/register/rigid`);
    }

    controlPoints(sid: string): Promise<ControlPointSetJson> {
        return this.getJson(`/sessions/${sid}/controlpoints`);
    }

    metrics(sid: string): Promise<MetricsSummary> {
        return this.getJson(`/sessions/${sid}/metrics`);
    }

    audit(sid: string): Promise<{ events: AuditEvent[] }> {
        return this.getJson(`/sessions/${sid}/audit`);
    }

    async drag(sid: string, pointId: number, displacement: Vec3): Promise<MetricsSummary> {
        const out = await this.postJson<{ metrics: MetricsSummary }>(
            `/sessions/${sid}/controlpoints/${pointId}/drag`,
            { displacement },
        );
        return out.metrics;
    }

    async undo(sid: string): Promise<MetricsSummary> {
        const out = await this.postJson<{ metrics: MetricsSummary }>(`/sessions/${sid}/undo`);
        return out.metrics;
    }

    sliceUrl(sid: string, request: SliceRequest): string {
        const params = new URLSearchParams({
            plane: request.plane,
            pos: request.pos.toString(),
            clip: request.clip.toString(),
            blend: request.blend,
        });
        return `${this.baseUrl}/sessions/${sid}/slice?${params.toString()}`;
    }

    /** Fetch the fused PNG for a viewport; an AbortSignal lets the caller
     * cancel a stale request when the viewport moved again. */
    async slicePng(sid: string, request: SliceRequest, signal?: AbortSignal): Promise<Blob> {
        const response = await raiseForStatus(
            await this.fetchFn(this.sliceUrl(sid, request), signal ? { signal } : undefined),
        );
        return response.blob();
    }
}
